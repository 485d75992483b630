//! Four-arm ablation over the weight generator (LAWG), language-adaptive
//! pooling (LAP) and the multi-task head (MTH).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lawg_core::config::{Mode, TrainConfig};
use lawg_core::law::count_dynamic_params;
use lawg_core::{Error, Result};
use synthground::{GroundingSample, Split};

use crate::eval::{evaluate, EvalReport};
use crate::train::{initial_checkpoint, load_data, train_from};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arm {
    pub name: &'static str,
    pub lawg: bool,
    pub lap: bool,
    pub mth: bool,
}

pub const ARMS: [Arm; 4] = [
    Arm {
        name: "lawg",
        lawg: true,
        lap: false,
        mth: false,
    },
    Arm {
        name: "lap",
        lawg: false,
        lap: true,
        mth: false,
    },
    Arm {
        name: "lawg+lap",
        lawg: true,
        lap: true,
        mth: false,
    },
    Arm {
        name: "lawg+lap+mth",
        lawg: true,
        lap: true,
        mth: true,
    },
];

impl Arm {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.model.lawg = self.lawg;
        cfg.model.lap = self.lap;
        cfg.model.mth = self.mth;
        cfg.mode = if self.mth { Mode::Multitask } else { Mode::Rec };
        cfg
    }
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub arm: Arm,
    pub params: usize,
    pub dynamic_params: usize,
    pub val: EvalReport,
    pub batches_log: String,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub arms: Vec<ArmResult>,
}

impl AblationReport {
    /// True when every arm saw the same batches in the same order.
    pub fn shared_data_order(&self) -> bool {
        self.arms.windows(2).all(|w| w[0].batches_log == w[1].batches_log)
    }

    pub fn get(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("arm,lawg,lap,mth,params,dynamic_params,val_prec50,val_prec50_relational,val_miou\n");
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for a in &self.arms {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                a.arm.name,
                a.arm.lawg as u8,
                a.arm.lap as u8,
                a.arm.mth as u8,
                a.params,
                a.dynamic_params,
                f(a.val.prec50),
                f(a.val.prec50_relational),
                f(a.val.miou)
            );
        }
        s
    }
}

/// Trains every arm with the base config's seed and budget, evaluates the
/// final parameters on the full validation split, and writes `ablation.csv`.
pub fn ablate(base: &TrainConfig, out: &Path, progress: &mut dyn FnMut(&str, u64)) -> Result<AblationReport> {
    let mut base = base.clone();
    let (ds, vocab) = load_data(&mut base)?;
    let val: Vec<&GroundingSample> = ds.split(Split::Val).collect();
    let mut arms = Vec::new();
    for arm in ARMS {
        let cfg = arm.apply(&base);
        cfg.validate()?;
        let dir = out.join(arm.name);
        let start = initial_checkpoint(&cfg)?;
        let params = start.params.numel();
        let dynamic = if cfg.model.lawg {
            count_dynamic_params(&cfg.model)
        } else {
            0
        };
        let outcome = train_from(start, &ds, &vocab, &dir, &mut |step, _| progress(arm.name, step))?;
        let report = evaluate(&outcome.last.params, &cfg, &vocab, &val, "val")?;
        let log_path = dir.join("batches.log");
        let batches_log = fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
        arms.push(ArmResult {
            arm,
            params,
            dynamic_params: dynamic,
            val: report,
            batches_log,
            out_dir: dir,
        });
    }
    let report = AblationReport { arms };
    let path = out.join("ablation.csv");
    fs::write(&path, report.to_csv()).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}
