//! Process-wide registry of user-defined ops.
//!
//! Registration must finish before any model is parsed or emulated; lookups
//! afterwards are read-only and may happen from any thread.

use std::collections::BTreeMap;
use std::sync::{Arc, LazyLock, RwLock};

use super::op::Attrs;
use super::tensor::Tensor;
use super::IrError;

pub type ShapeFn = Arc<dyn Fn(&[Vec<usize>], &Attrs) -> Result<Vec<usize>, String> + Send + Sync>;
/// Exact evaluation: input tensors in, un-rounded output out. The caller
/// casts the result to the layer's result type.
pub type EmulationFn = Arc<dyn Fn(&[Tensor], &Attrs) -> Result<Tensor, String> + Send + Sync>;

#[derive(Clone)]
pub struct CustomOpDef {
    pub tag: String,
    pub shape_fn: ShapeFn,
    pub emulation_fn: EmulationFn,
    /// Opaque cost reported by estimation: (multipliers, latency cycles).
    pub cost: (usize, usize),
}

static REGISTRY: LazyLock<RwLock<BTreeMap<String, Arc<CustomOpDef>>>> = LazyLock::new(Default::default);

pub fn register_custom_op<S, E>(tag: &str, shape_fn: S, emulation_fn: E) -> Result<(), IrError>
where
    S: Fn(&[Vec<usize>], &Attrs) -> Result<Vec<usize>, String> + Send + Sync + 'static,
    E: Fn(&[Tensor], &Attrs) -> Result<Tensor, String> + Send + Sync + 'static,
{
    register_custom_op_with_cost(tag, shape_fn, emulation_fn, (0, 1))
}

pub fn register_custom_op_with_cost<S, E>(tag: &str, shape_fn: S, emulation_fn: E, cost: (usize, usize)) -> Result<(), IrError>
where
    S: Fn(&[Vec<usize>], &Attrs) -> Result<Vec<usize>, String> + Send + Sync + 'static,
    E: Fn(&[Tensor], &Attrs) -> Result<Tensor, String> + Send + Sync + 'static,
{
    let mut reg = REGISTRY.write().expect("custom op registry poisoned");
    if reg.contains_key(tag) {
        return Err(IrError::DuplicateTag(tag.to_string()));
    }
    let def = CustomOpDef { tag: tag.to_string(), shape_fn: Arc::new(shape_fn), emulation_fn: Arc::new(emulation_fn), cost };
    reg.insert(tag.to_string(), Arc::new(def));
    Ok(())
}

pub fn lookup(tag: &str) -> Option<Arc<CustomOpDef>> {
    REGISTRY.read().expect("custom op registry poisoned").get(tag).cloned()
}

pub fn is_registered(tag: &str) -> bool {
    lookup(tag).is_some()
}

/// Shape function for elementwise unary ops.
pub fn same_shape(ins: &[Vec<usize>], _: &Attrs) -> Result<Vec<usize>, String> {
    match ins {
        [x] => Ok(x.clone()),
        _ => Err(format!("expected one input, got {}", ins.len())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_tag_rejected() {
        let sq = |ins: &[Tensor], _: &Attrs| {
            let x = &ins[0];
            Ok(Tensor::new(x.shape.clone(), x.values.iter().map(|v| v * v).collect()))
        };
        register_custom_op("TestDupSquare", same_shape, sq).unwrap();
        assert!(is_registered("TestDupSquare"));
        assert!(matches!(register_custom_op("TestDupSquare", same_shape, sq), Err(IrError::DuplicateTag(_))));
        assert!(!is_registered("NeverRegistered"));
    }
}
