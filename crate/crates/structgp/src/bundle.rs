//! Fitted-model bundle: everything needed to reload a model for
//! prediction — parameters, pathways, output transform, learned
//! structure, fit diagnostics, and the resolved run configuration that
//! produced it.

use std::path::Path;

use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::data::TransformState;
use crate::error::{Error, Result};
use crate::fit::{FitMode, FitResult};
use crate::kernel::GraphParams;
use crate::latent::PathwayParams;
use crate::learn::LearnedStructure;

/// A saved model plus the configuration it was fit under.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub mode: FitMode,
    pub params: GraphParams,
    pub pathways: Option<PathwayParams>,
    pub transform: Option<TransformState>,
    pub structure: Option<LearnedStructure>,
    pub nmll: f64,
    pub smooth_h: f64,
    /// task labels in index order
    pub tasks: Vec<String>,
    /// training subject labels in index order (pathway indices refer to
    /// these)
    pub subjects: Vec<String>,
    /// verbatim echo of the resolved run configuration
    pub config: Value,
}

impl ModelBundle {
    pub fn from_fit(
        fit: FitResult,
        transform: Option<TransformState>,
        tasks: Vec<String>,
        subjects: Vec<String>,
        config: &RunConfig,
    ) -> Self {
        Self {
            mode: fit.mode,
            params: fit.params,
            pathways: fit.pathways,
            transform,
            structure: fit.structure,
            nmll: fit.nmll,
            smooth_h: fit.smooth_h,
            tasks,
            subjects,
            config: config.echo(),
        }
    }

    pub fn to_json(&self) -> Value {
        json!({
            "mode": serde_json::to_value(self.mode).expect("mode serializes"),
            "params": self.params.to_json(),
            "pathways": self.pathways.as_ref().map(|p| p.to_json()),
            "transform": self.transform.as_ref().map(|t| {
                serde_json::to_value(t).expect("transform serializes")
            }),
            "structure": self.structure.as_ref().map(|s| {
                serde_json::to_value(s).expect("structure serializes")
            }),
            "nmll": self.nmll,
            "smooth_h": self.smooth_h,
            "tasks": self.tasks,
            "subjects": self.subjects,
            "config": self.config,
        })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let bad = |what: &str| Error::Data(format!("model bundle: missing or invalid {what}"));
        let field = |name: &str| v.get(name).ok_or_else(|| bad(name));
        let optional = |name: &str| match v.get(name) {
            None | Some(Value::Null) => None,
            Some(inner) => Some(inner),
        };
        Ok(Self {
            mode: serde_json::from_value(field("mode")?.clone()).map_err(|_| bad("mode"))?,
            params: GraphParams::from_json(field("params")?)?,
            pathways: optional("pathways").map(PathwayParams::from_json).transpose()?,
            transform: optional("transform")
                .map(|t| serde_json::from_value(t.clone()).map_err(|_| bad("transform")))
                .transpose()?,
            structure: optional("structure")
                .map(|s| serde_json::from_value(s.clone()).map_err(|_| bad("structure")))
                .transpose()?,
            nmll: field("nmll")?.as_f64().ok_or_else(|| bad("nmll"))?,
            smooth_h: field("smooth_h")?.as_f64().ok_or_else(|| bad("smooth_h"))?,
            tasks: serde_json::from_value(field("tasks")?.clone()).map_err(|_| bad("tasks"))?,
            subjects: serde_json::from_value(field("subjects")?.clone())
                .map_err(|_| bad("subjects"))?,
            config: field("config")?.clone(),
        })
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json())
            .map_err(|e| Error::Data(format!("serializing model bundle: {e}")))?;
        write_atomic(path.as_ref(), text.as_bytes())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(&path)?;
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("parsing model bundle: {e}")))?;
        Self::from_json(&v)
    }
}

/// Write a file atomically: write to a sibling temp file, then rename
/// into place, so readers never observe a partial artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("invalid output path {}", path.display())))?;
    let mut tmp = std::path::PathBuf::from(dir.unwrap_or_else(|| Path::new(".")));
    tmp.push(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn sample_bundle() -> ModelBundle {
        let k = 2;
        let params = GraphParams {
            s: DMatrix::from_row_slice(k, k, &[1.0, 0.0, 0.7, 1.0]),
            log_l: DMatrix::from_row_slice(k, k, &[0.1, 0.2, 0.3, 0.4]),
            noise: vec![0.1, 0.2],
        };
        let pathways = PathwayParams {
            logits: DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.5, 0.5]),
            log_l_sub: DMatrix::from_row_slice(3, 2, &[0.2, 0.8, 0.1, 0.4, 0.6, 0.3]),
            tau: DMatrix::from_row_slice(3, 2, &[0.0, 1.0, -1.0, 0.5, 0.2, 0.0]),
            gamma: 0.3,
        };
        ModelBundle {
            mode: FitMode::LpStructGp,
            params,
            pathways: Some(pathways),
            transform: None,
            structure: None,
            nmll: 12.5,
            smooth_h: 0.004,
            tasks: vec!["hr".into(), "map".into()],
            subjects: vec!["s0".into(), "s1".into(), "s2".into()],
            config: RunConfig::default().echo(),
        }
    }

    #[test]
    fn json_roundtrip() {
        let b = sample_bundle();
        let back = ModelBundle::from_json(&b.to_json()).unwrap();
        assert_eq!(back.mode, b.mode);
        assert_eq!(back.params.s, b.params.s);
        assert_eq!(back.params.noise, b.params.noise);
        let (pa, pb) = (back.pathways.unwrap(), b.pathways.unwrap());
        assert_eq!(pa.logits, pb.logits);
        assert_eq!(pa.tau, pb.tau);
        assert!(back.transform.is_none());
        assert_eq!(back.nmll, b.nmll);
        assert_eq!(back.config, b.config);
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let b = sample_bundle();
        b.save(&path).unwrap();
        let back = ModelBundle::load(&path).unwrap();
        assert_eq!(back.params.s, b.params.s);
        assert_eq!(back.smooth_h, b.smooth_h);
        // no temp files are left behind
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name() != "model.json")
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn missing_field_is_a_data_error() {
        let err = ModelBundle::from_json(&serde_json::json!({"mode": "structgp"})).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn config_echo_survives_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.set("gamma", "0.45").unwrap();
        let mut b = sample_bundle();
        b.config = cfg.echo();
        let back = ModelBundle::from_json(&b.to_json()).unwrap();
        let echoed: RunConfig = serde_json::from_value(back.config).unwrap();
        assert_eq!(echoed, cfg);
    }
}
