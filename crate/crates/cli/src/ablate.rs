use std::path::Path;

use pamr_core::embedding::LaConfig;
use pamr_core::io::{read_dataset, write_atomic};
use pamr_core::training::{finetune_classify, pretrain_run};
use pamr_core::{BackboneConfig, RunConfig};

use crate::{num_classes, save_config, Axis};

pub const MASK_RATIOS: [f64; 5] = [0.9, 0.8, 0.7, 0.6, 0.5];
/// `(label, window, groups)`.
pub const LA_PARAMS: [(&str, usize, usize); 4] = [("A", 5, 32), ("B", 5, 16), ("C", 7, 32), ("D", 7, 16)];
/// `(avg branch, max branch)`.
pub const LA_BRANCHES: [(bool, bool); 4] = [(true, true), (true, false), (false, true), (false, false)];

struct Row {
    key: String,
    model: BackboneConfig,
}

fn rows(base: &BackboneConfig, axis: Axis) -> Vec<Row> {
    match axis {
        Axis::MaskRatio => MASK_RATIOS
            .iter()
            .map(|&m| Row { key: format!("{m}"), model: BackboneConfig { mask_ratio: m, ..base.clone() } })
            .collect(),
        Axis::LaParams => LA_PARAMS
            .iter()
            .map(|&(label, window, groups)| Row {
                key: format!("{label},{window},{groups}"),
                model: BackboneConfig { la: LaConfig { window, groups, ..base.la }, ..base.clone() },
            })
            .collect(),
        Axis::LaBranches => LA_BRANCHES
            .iter()
            .map(|&(use_avg, use_max)| Row {
                key: format!("{use_avg},{use_max}"),
                model: BackboneConfig { la: LaConfig { use_avg, use_max, ..base.la }, ..base.clone() },
            })
            .collect(),
    }
}

fn header(axis: Axis) -> &'static str {
    match axis {
        Axis::MaskRatio => "mask_ratio",
        Axis::LaParams => "model,la_window,la_groups",
        Axis::LaBranches => "avg_branch,max_branch",
    }
}

pub fn run(cfg: &RunConfig, axis: Axis, data: &Path, out: &Path) -> anyhow::Result<()> {
    let train = read_dataset(&data.join("train"))?;
    let test = if data.join("test").is_dir() { read_dataset(&data.join("test"))? } else { Vec::new() };
    let k = num_classes(&[&train, &test])?;
    let grid = rows(&cfg.model, axis);
    for r in &grid {
        r.model.validate()?;
    }
    std::fs::create_dir_all(out)?;
    save_config(out, cfg)?;
    let mut csv = format!("{},pretrain_loss,train_accuracy,test_accuracy\n", header(axis));
    for r in &grid {
        let pre = pretrain_run(&train, &r.model, &cfg.pretrain, None)?;
        let ckpt = pamr_core::Checkpoint::capture(&pre.params, r.model.fingerprint(), pre.steps as u64, None);
        let ft = finetune_classify(Some(&ckpt), &train, &test, &r.model, &cfg.head(k), &cfg.finetune)?;
        let loss = pre.log.losses().last().copied().unwrap_or(f64::NAN);
        let test_acc = ft.test_accuracy.map(|a| a.to_string()).unwrap_or_default();
        println!("{}: pretrain loss {loss:.6}, train acc {:.4}, test acc {test_acc}", r.key, ft.train_accuracy);
        csv.push_str(&format!("{},{loss:e},{},{test_acc}\n", r.key, ft.train_accuracy));
    }
    let name = match axis {
        Axis::MaskRatio => "ablate_mask_ratio.csv",
        Axis::LaParams => "ablate_la_params.csv",
        Axis::LaBranches => "ablate_la_branches.csv",
    };
    write_atomic(&out.join(name), csv.as_bytes())?;
    println!("wrote {}", out.join(name).display());
    Ok(())
}
