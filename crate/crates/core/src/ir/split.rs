use std::collections::BTreeSet;

use super::graph::{LayerNode, ModelGraph, Role};
use super::op::Op;
use super::IrError;

/// Splits `g` after each named node. Every edge crossing a cut must leave the
/// cut node itself; the cut tensor becomes the next subgraph's input.
pub fn split_graph(g: &ModelGraph, cut_after: &[String]) -> Result<Vec<ModelGraph>, IrError> {
    if cut_after.is_empty() {
        return Ok(vec![g.clone()]);
    }
    let order = g.topo_order();
    let mut cuts = Vec::new();
    for name in cut_after {
        let pos = g.position(name).ok_or_else(|| IrError::UnknownLayerName(name.clone()))?;
        if pos + 1 == order.len() || cuts.iter().any(|(p, _)| *p == pos) {
            return Err(IrError::InvalidCut(name.clone()));
        }
        cuts.push((pos, name.clone()));
    }
    cuts.sort();

    for (pos, name) in &cuts {
        for consumer in order.iter().skip(pos + 1) {
            let node = g.node(consumer).unwrap();
            for p in node.predecessors() {
                if g.position(p).unwrap() <= *pos && p != name {
                    return Err(IrError::InvalidCut(name.clone()));
                }
            }
        }
        for o in g.outputs() {
            if g.position(o).unwrap() < *pos {
                return Err(IrError::InvalidCut(name.clone()));
            }
        }
        if g.outputs().contains(name) {
            return Err(IrError::InvalidCut(name.clone()));
        }
    }

    let mut out = Vec::with_capacity(cuts.len() + 1);
    let mut start = 0;
    let mut boundary: Option<&str> = None;
    let ends = cuts.iter().map(|(p, n)| (*p, Some(n.clone()))).chain([(order.len() - 1, None)]);
    for (end, cut) in ends {
        let mut nodes = Vec::new();
        if let Some(b) = boundary {
            let src = g.node(b).unwrap();
            let mut input = LayerNode::new(b, Op::Input { shape: g.shape(b).to_vec() }, &[]);
            input.set_precision(Role::Result, src.precision(Role::Result));
            nodes.push(input);
        }
        let names: BTreeSet<&str> = order[start..=end].iter().map(|s| s.as_str()).collect();
        for n in &order[start..=end] {
            nodes.push(g.node(n).unwrap().clone());
        }
        let outputs = match &cut {
            Some(c) => vec![c.clone()],
            None => g.outputs().to_vec(),
        };
        let mut config = g.config.clone();
        config.layers.retain(|k, _| names.contains(k.as_str()) || Some(k.as_str()) == boundary);
        config.fifo_depths.retain(|k, _| k.split("->").all(|p| names.contains(p) || Some(p) == boundary));
        config.split_after.clear();
        out.push(ModelGraph::build(nodes, outputs, config, g.metadata.clone())?);
        start = end + 1;
        boundary = cut.map(|c| order[g.position(&c).unwrap()].as_str());
    }
    Ok(out)
}
