use std::collections::BTreeMap;

use crate::ir::Strategy;

use super::CodegenError;

const TEMPLATES: &[(&str, &str)] = &[
    ("activation", include_str!("../../templates/activation.tpl")),
    ("add", include_str!("../../templates/add.tpl")),
    ("batchnorm", include_str!("../../templates/batchnorm.tpl")),
    ("build_tcl", include_str!("../../templates/build_tcl.tpl")),
    ("concat", include_str!("../../templates/concat.tpl")),
    ("constant", include_str!("../../templates/constant.tpl")),
    ("conv_da", include_str!("../../templates/conv_da.tpl")),
    ("conv_latency", include_str!("../../templates/conv_latency.tpl")),
    ("conv_resource", include_str!("../../templates/conv_resource.tpl")),
    ("custom", include_str!("../../templates/custom.tpl")),
    ("dense_da", include_str!("../../templates/dense_da.tpl")),
    ("dense_latency", include_str!("../../templates/dense_latency.tpl")),
    ("dense_resource", include_str!("../../templates/dense_resource.tpl")),
    ("input", include_str!("../../templates/input.tpl")),
    ("pool", include_str!("../../templates/pool.tpl")),
    ("quant", include_str!("../../templates/quant.tpl")),
    ("reshape", include_str!("../../templates/reshape.tpl")),
    ("softmax", include_str!("../../templates/softmax.tpl")),
    ("table", include_str!("../../templates/table.tpl")),
    ("top_io_parallel", include_str!("../../templates/top_io_parallel.tpl")),
    ("top_io_stream", include_str!("../../templates/top_io_stream.tpl")),
];

pub fn template_names() -> Vec<&'static str> {
    TEMPLATES.iter().map(|(k, _)| *k).collect()
}

pub fn template_text(key: &str) -> Option<&'static str> {
    TEMPLATES.iter().find(|(k, _)| *k == key).map(|(_, t)| *t)
}

/// Template key for an op type name (as in `Op::type_name`) and strategy.
pub fn template_key(op: &str, strategy: Option<Strategy>) -> Result<&'static str, CodegenError> {
    let family = match op {
        "Dense" | "Pointwise" => "dense",
        "Conv1D" | "Conv2D" | "DepthwiseConv" => "conv",
        "Input" => "input",
        "Constant" => "constant",
        "BatchNorm" => "batchnorm",
        "Activation" => "activation",
        "Table" => "table",
        "Softmax" => "softmax",
        "MaxPool" | "AvgPool" => "pool",
        "Add" => "add",
        "Concat" => "concat",
        "Reshape" | "Transpose" => "reshape",
        "Quant" => "quant",
        "Custom" => "custom",
        _ => "",
    };
    let key = match (family, strategy) {
        ("dense" | "conv", Some(s)) => format!(
            "{family}_{}",
            match s {
                Strategy::Latency => "latency",
                Strategy::Resource => "resource",
                Strategy::Da => "da",
            }
        ),
        ("dense" | "conv", None) | ("", _) => String::new(),
        (f, _) => f.to_string(),
    };
    TEMPLATES.iter().find(|(k, _)| **k == key).map(|(k, _)| *k).ok_or_else(|| CodegenError::MissingTemplate {
        op: op.to_string(),
        strategy: strategy.map_or_else(|| "-".to_string(), |s| s.to_string()),
    })
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

/// Substitutes every `{{name}}`. A `{` not starting a placeholder is copied
/// as is, so `{{{values}}}` renders as `{` + values + `}`.
pub fn render_text(template: &str, bindings: &BTreeMap<&str, String>) -> Result<String, CodegenError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(i) = rest.find("{{") {
        out.push_str(&rest[..i]);
        let after = &rest[i + 2..];
        match after.find("}}") {
            Some(j) if is_ident(&after[..j]) => {
                let name = &after[..j];
                let v = bindings.get(name).ok_or_else(|| CodegenError::UnboundPlaceholder(name.to_string()))?;
                out.push_str(v);
                rest = &after[j + 2..];
            }
            _ => {
                out.push('{');
                rest = &rest[i + 1..];
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Renders the checked-in template for `(op, strategy)`.
pub fn render_template(op: &str, strategy: Option<Strategy>, bindings: &BTreeMap<&str, String>) -> Result<String, CodegenError> {
    let key = template_key(op, strategy)?;
    render_text(template_text(key).expect("key comes from the table"), bindings)
}
