//! Deterministic tool registry: the pure actions an external agent can
//! call over line-delimited JSON. Web search, plotting, and any
//! reasoning loop live outside this process by design.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::domain::{classify_ir, compute_homa_ir, IrThresholds};
use crate::model_io::ModelBundle;

/// The seven supported tools. The four prediction tools are backed by
/// frozen model bundles.
pub const TOOL_NAMES: [&str; 7] = [
    "homa_ir_calculator",
    "predict_demographics_only",
    "predict_wearables_demographics",
    "predict_wearables_demographics_glucose",
    "predict_wearables_demographics_lipid_metabolic",
    "comparison_arithmetic",
    "percent_change",
];

pub const PREDICTION_TOOLS: [&str; 4] = [
    "predict_demographics_only",
    "predict_wearables_demographics",
    "predict_wearables_demographics_glucose",
    "predict_wearables_demographics_lipid_metabolic",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolRequest {
    pub tool: String,
    #[serde(default)]
    pub args: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResponse {
    pub ok: bool,
    pub tool: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub elapsed_ms: u64,
}

impl ToolResponse {
    fn success(tool: &str, result: Value, started: Instant) -> Self {
        ToolResponse {
            ok: true,
            tool: tool.to_string(),
            result: Some(result),
            error: None,
            elapsed_ms: started.elapsed().as_millis() as u64,
        }
    }

    fn failure(tool: &str, error: String, started: Instant) -> Self {
        ToolResponse {
            ok: false,
            tool: tool.to_string(),
            result: None,
            error: Some(error),
            elapsed_ms: started.elapsed().as_millis() as u64,
        }
    }
}

/// Frozen models backing the prediction tools, keyed by tool name.
#[derive(Debug, Default)]
pub struct Toolbox {
    pub models: BTreeMap<String, ModelBundle>,
    pub thresholds: IrThresholds,
}

impl Toolbox {
    pub fn new(thresholds: IrThresholds) -> Self {
        Toolbox {
            models: BTreeMap::new(),
            thresholds,
        }
    }

    pub fn register(&mut self, tool: &str, bundle: ModelBundle) {
        self.models.insert(tool.to_string(), bundle);
    }
}

fn number_arg(args: &BTreeMap<String, Value>, name: &str) -> Result<f64, String> {
    match args.get(name) {
        Some(v) => v
            .as_f64()
            .ok_or_else(|| format!("argument '{name}' must be a number, got {v}")),
        None => Err(format!("missing required argument '{name}'")),
    }
}

fn reject_unknown_args(args: &BTreeMap<String, Value>, allowed: &[&str]) -> Result<(), String> {
    for key in args.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(format!("unknown argument '{key}'"));
        }
    }
    Ok(())
}

fn numeric_feature_map(args: &BTreeMap<String, Value>) -> Result<BTreeMap<String, f64>, String> {
    let mut out = BTreeMap::new();
    for (key, value) in args {
        let v = value
            .as_f64()
            .ok_or_else(|| format!("feature '{key}' must be a number, got {value}"))?;
        if !v.is_finite() {
            return Err(format!("feature '{key}' must be finite"));
        }
        out.insert(key.clone(), v);
    }
    Ok(out)
}

fn dispatch_inner(req: &ToolRequest, toolbox: &Toolbox) -> Result<Value, String> {
    match req.tool.as_str() {
        "homa_ir_calculator" => {
            reject_unknown_args(&req.args, &["insulin", "glucose"])?;
            let insulin = number_arg(&req.args, "insulin")?;
            let glucose = number_arg(&req.args, "glucose")?;
            let homa = compute_homa_ir(insulin, glucose).map_err(|e| e.to_string())?;
            let class = classify_ir(homa, &toolbox.thresholds).map_err(|e| e.to_string())?;
            Ok(json!({
                "homa_ir": homa.value(),
                "class": class.label(),
            }))
        }
        "comparison_arithmetic" => {
            reject_unknown_args(&req.args, &["a", "b"])?;
            let a = number_arg(&req.args, "a")?;
            let b = number_arg(&req.args, "b")?;
            if a == 0.0 {
                return Err("relative difference undefined for a = 0".into());
            }
            Ok(json!({ "relative_difference": (b - a) / a.abs() }))
        }
        "percent_change" => {
            reject_unknown_args(&req.args, &["from", "to"])?;
            let from = number_arg(&req.args, "from")?;
            let to = number_arg(&req.args, "to")?;
            if from == 0.0 {
                return Err("percent change undefined for from = 0".into());
            }
            Ok(json!({ "percent_change": 100.0 * (to - from) / from.abs() }))
        }
        tool if PREDICTION_TOOLS.contains(&tool) => {
            let bundle = toolbox
                .models
                .get(tool)
                .ok_or_else(|| format!("no frozen model registered for '{tool}'"))?;
            let features = numeric_feature_map(&req.args)?;
            let unknown: Vec<&String> = features
                .keys()
                .filter(|k| !bundle.raw_columns.contains(k))
                .collect();
            if !unknown.is_empty() {
                return Err(format!(
                    "unknown feature(s) {unknown:?}; this model expects {:?}",
                    bundle.raw_columns
                ));
            }
            let (y_pred, class) = bundle.predict_named(&features).map_err(|e| e.to_string())?;
            Ok(json!({
                "predicted_homa_ir": y_pred,
                "class": class.label(),
                "model": bundle.name,
            }))
        }
        other => Err(format!(
            "unknown tool '{other}'; available tools: {TOOL_NAMES:?}"
        )),
    }
}

/// Dispatch one request. Never panics: every failure becomes a
/// structured error response.
pub fn tool_dispatch(req: &ToolRequest, toolbox: &Toolbox) -> ToolResponse {
    let started = Instant::now();
    match dispatch_inner(req, toolbox) {
        Ok(result) => ToolResponse::success(&req.tool, result, started),
        Err(error) => ToolResponse::failure(&req.tool, error, started),
    }
}

/// Parse and dispatch one line of the stdin/stdout protocol. Malformed
/// JSON yields a structured error, never a crash.
pub fn dispatch_line(line: &str, toolbox: &Toolbox) -> ToolResponse {
    let started = Instant::now();
    match serde_json::from_str::<ToolRequest>(line) {
        Ok(req) => tool_dispatch(&req, toolbox),
        Err(e) => ToolResponse::failure("", format!("malformed request: {e}"), started),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featureset::feature_set_by_name;
    use crate::pipeline::{run_experiment, ExperimentSpec, ModelScheme};
    use crate::synthcohort::{generate_functional_cohort, FunctionalSpec};

    fn demo_toolbox() -> Toolbox {
        let dir = tempfile::tempdir().unwrap();
        let (files, _, _) =
            generate_functional_cohort(60, &FunctionalSpec::default(), 8, dir.path()).unwrap();
        let records = crate::ingest::load_cohort(&files).unwrap();
        let mut toolbox = Toolbox::new(IrThresholds::default());
        let fs = feature_set_by_name("demographics").unwrap();
        let mut spec = ExperimentSpec::new("demographics", fs, ModelScheme::TreeDirect);
        spec.gbm.n_estimators = 5;
        let result = run_experiment(&records, &spec).unwrap();
        toolbox.register(
            "predict_demographics_only",
            ModelBundle::from_fold(&result, 0, IrThresholds::default()),
        );
        toolbox
    }

    fn request(tool: &str, args: Value) -> ToolRequest {
        ToolRequest {
            tool: tool.to_string(),
            args: serde_json::from_value(args).unwrap(),
        }
    }

    #[test]
    fn homa_calculator_formula() {
        let toolbox = Toolbox::new(IrThresholds::default());
        let resp = tool_dispatch(
            &request("homa_ir_calculator", json!({"insulin": 10, "glucose": 90})),
            &toolbox,
        );
        assert!(resp.ok);
        let result = resp.result.unwrap();
        let homa = result["homa_ir"].as_f64().unwrap();
        assert!((homa - 900.0 / 405.0).abs() < 1e-12);
        assert_eq!(result["class"], "ImpairedIS");
    }

    #[test]
    fn comparison_relative_difference() {
        let toolbox = Toolbox::new(IrThresholds::default());
        let resp = tool_dispatch(
            &request("comparison_arithmetic", json!({"a": 2.0, "b": 2.5})),
            &toolbox,
        );
        let rd = resp.result.unwrap()["relative_difference"].as_f64().unwrap();
        assert!((rd - 0.25).abs() < 1e-12);
    }

    #[test]
    fn percent_change_tool() {
        let toolbox = Toolbox::new(IrThresholds::default());
        let resp = tool_dispatch(
            &request("percent_change", json!({"from": 2.0, "to": 1.5})),
            &toolbox,
        );
        let pc = resp.result.unwrap()["percent_change"].as_f64().unwrap();
        assert!((pc + 25.0).abs() < 1e-12);
    }

    #[test]
    fn prediction_tool_is_pure() {
        let toolbox = demo_toolbox();
        let req = request(
            "predict_demographics_only",
            json!({"age": 45.0, "bmi": 31.0}),
        );
        let a = tool_dispatch(&req, &toolbox);
        let b = tool_dispatch(&req, &toolbox);
        assert!(a.ok);
        assert_eq!(a.result, b.result);
    }

    #[test]
    fn prediction_tool_missing_model_is_structured_error() {
        let toolbox = Toolbox::new(IrThresholds::default());
        let resp = tool_dispatch(
            &request("predict_wearables_demographics", json!({"age": 45.0})),
            &toolbox,
        );
        assert!(!resp.ok);
        assert!(resp.error.unwrap().contains("no frozen model"));
    }

    #[test]
    fn prediction_tool_rejects_unknown_and_missing_features() {
        let toolbox = demo_toolbox();
        let resp = tool_dispatch(
            &request("predict_demographics_only", json!({"age": 45.0, "shoe_size": 9})),
            &toolbox,
        );
        assert!(!resp.ok);
        assert!(resp.error.unwrap().contains("shoe_size"));

        let resp = tool_dispatch(
            &request("predict_demographics_only", json!({"age": 45.0})),
            &toolbox,
        );
        assert!(!resp.ok);
        assert!(resp.error.unwrap().contains("bmi"));
    }

    #[test]
    fn unknown_tool_and_bad_args_are_errors() {
        let toolbox = Toolbox::new(IrThresholds::default());
        let resp = tool_dispatch(&request("web_search", json!({"q": "homa"})), &toolbox);
        assert!(!resp.ok);

        let resp = tool_dispatch(
            &request("homa_ir_calculator", json!({"insulin": "ten", "glucose": 90})),
            &toolbox,
        );
        assert!(!resp.ok);

        let resp = tool_dispatch(
            &request("homa_ir_calculator", json!({"insulin": -4, "glucose": 90})),
            &toolbox,
        );
        assert!(!resp.ok);
    }

    #[test]
    fn malformed_lines_never_crash() {
        let toolbox = demo_toolbox();
        for line in [
            "",
            "{",
            "null",
            "42",
            "\"string\"",
            "{\"args\": {}}",
            "{\"tool\": 3}",
            "{\"tool\": \"homa_ir_calculator\", \"args\": 5}",
            "{\"tool\": \"homa_ir_calculator\", \"extra\": 1}",
        ] {
            let resp = dispatch_line(line, &toolbox);
            assert!(!resp.ok, "line {line:?} should fail");
            assert!(resp.error.is_some());
        }
    }
}
