use std::fs;
use std::io::Write;
use std::path::Path;

use covfilt::experiment::{self, ExperimentConfig, FilterKind, Method};
use covfilt::simulator::{self, TrackDataset};
use covfilt::training::TrainReport;
use log::info;

use crate::artifacts::{self, Layout, OOD, TEST, TRAIN};
use crate::Failure;

fn load_dataset(dir: &Path, name: &str) -> Result<TrackDataset, Failure> {
    let path = dir.join(name);
    artifacts::require(&path, "dataset")?;
    Ok(simulator::load_tracks(&path)?)
}

pub fn generate(cfg: &ExperimentConfig, layout: &Layout) -> Result<(), Failure> {
    cfg.validate()?;
    artifacts::create_dir(&layout.data)?;
    let data = experiment::generate(cfg)?;
    info!(
        "generated {} train, {} test and {} shifted tracks",
        data.train.len(),
        data.test.len(),
        data.ood.len()
    );
    for (name, set) in [(TRAIN, &data.train), (TEST, &data.test), (OOD, &data.ood)] {
        simulator::save_tracks(layout.data.join(name), set)?;
    }
    let files = [TRAIN, TEST, OOD].map(String::from);
    artifacts::write_manifest(&layout.data, "generate", cfg, &files)
}

fn write_report(dir: &Path, name: &str, report: &TrainReport) -> Result<Vec<String>, Failure> {
    let json = format!("{name}.json");
    fs::write(dir.join(&json), serde_json::to_string_pretty(report)? + "\n")?;
    let csv = format!("{name}_loss.csv");
    let mut f = fs::File::create(dir.join(&csv))?;
    writeln!(f, "epoch,loss,grad_norm")?;
    for (i, loss) in report.loss_curve.iter().enumerate() {
        let g = report.grad_norms.get(i).copied().unwrap_or(f64::NAN);
        writeln!(f, "{i},{loss},{g}")?;
    }
    Ok(vec![format!("reports/{json}"), format!("reports/{csv}")])
}

pub fn train(cfg: &ExperimentConfig, layout: &Layout) -> Result<(), Failure> {
    cfg.validate()?;
    let train = load_dataset(&layout.data, TRAIN)?;
    info!("training {:?} on {} tracks", cfg.methods.iter().map(|m| m.name()).collect::<Vec<_>>(), train.len());
    let trained = experiment::train_methods(cfg, &train)?;
    let correlation = experiment::estimate_correlation(&trained.base, &train)?;
    artifacts::create_dir(&layout.models)?;
    let mut files = artifacts::save_models(&layout.models, &trained.base, &trained.models, &correlation)?;
    let reports = layout.models.join("reports");
    artifacts::create_dir(&reports)?;
    for (name, report) in &trained.reports {
        info!("{name}: final loss {:?}", report.loss_curve.last());
        files.extend(write_report(&reports, name, report)?);
    }
    artifacts::write_manifest(&layout.models, "train", cfg, &files)
}

pub fn evaluate(cfg: &ExperimentConfig, layout: &Layout) -> Result<(), Failure> {
    cfg.validate()?;
    let models = artifacts::load_models(&layout.models, &cfg.methods)?;
    let correlation = match cfg.filter.kind {
        FilterKind::Standard => None,
        FilterKind::TimeCorrelated => Some(artifacts::load_correlation(&layout.models)?),
    };
    let variants = experiment::variants(&cfg.methods, cfg.epistemic.enabled);
    let baseline = if cfg.methods.contains(&Method::Fixed) {
        Method::Fixed.name().to_string()
    } else {
        variants[0].label.clone()
    };
    artifacts::create_dir(&layout.eval)?;
    let mut files = Vec::new();
    let mut text = String::new();
    let mut validity = serde_json::Map::new();
    for (split, name) in [("in_domain", TEST), ("ood", OOD)] {
        let data = load_dataset(&layout.data, name)?;
        info!("evaluating {} variants on {} {split} tracks", variants.len(), data.len());
        let eval = experiment::evaluate(cfg, &models, &data, &variants, correlation.as_ref())?;
        let table = eval.table(&baseline)?;

        let metrics = format!("metrics_{split}.csv");
        let mut f = fs::File::create(layout.eval.join(&metrics))?;
        table.write_csv(&mut f)?;
        files.push(metrics);

        let curves = format!("curves_{split}.csv");
        let mut f = fs::File::create(layout.eval.join(&curves))?;
        experiment::write_curves(&mut f, &eval.curves())?;
        files.push(curves);

        text.push_str(&format!("{split} (velocity error at final step, mm/s)\n"));
        text.push_str(&table.render());
        text.push('\n');

        let (emitted, jittered) = eval.validity();
        validity.insert(split.to_string(), serde_json::json!({ "emitted": emitted, "jittered": jittered }));
    }
    fs::write(layout.eval.join("metrics.txt"), &text)?;
    files.push("metrics.txt".into());
    fs::write(layout.eval.join("validity.json"), serde_json::to_string_pretty(&validity)? + "\n")?;
    files.push("validity.json".into());
    print!("{text}");
    artifacts::write_manifest(&layout.eval, "evaluate", cfg, &files)
}

pub fn demo_rainbow(cfg: &ExperimentConfig, layout: &Layout) -> Result<(), Failure> {
    cfg.validate()?;
    artifacts::create_dir(&layout.rainbow)?;
    let (_, fit) = experiment::fit_rainbow(cfg)?;
    let mut f = fs::File::create(layout.rainbow.join("rainbow.csv"))?;
    writeln!(
        f,
        "t,sample_x,sample_y,mean_x,mean_y,true_major,true_minor,true_angle,pred_x,pred_y,pred_major,pred_minor,pred_angle"
    )?;
    for (p, pred) in fit.points.iter().zip(&fit.predictions) {
        let (tm, tn, ta) = experiment::ellipse(&p.sigma_true);
        let (pm, pn, pa) = experiment::ellipse(&pred.covariance);
        writeln!(
            f,
            "{},{},{},{},{},{tm},{tn},{ta},{},{},{pm},{pn},{pa}",
            p.t, p.sample[0], p.sample[1], p.mean[0], p.mean[1], pred.mean[0], pred.mean[1]
        )?;
    }
    drop(f);
    let predicted: Vec<_> = fit.predictions.iter().map(|p| p.covariance.clone()).collect();
    let truth: Vec<_> = fit.points.iter().map(|p| p.sigma_true.clone()).collect();
    let (std_err, corr_err) = experiment::covariance_recovery(&predicted, &truth)?;
    info!("rainbow recovery: std error {std_err:.3}, correlation error {corr_err:.3}");
    let mut files = vec!["rainbow.csv".to_string()];
    files.extend(write_report(&layout.rainbow, "training", &fit.report)?.into_iter().map(|p| {
        p.trim_start_matches("reports/").to_string()
    }));
    let summary = serde_json::json!({
        "n_points": fit.points.len(),
        "relative_std_error": std_err,
        "correlation_error": corr_err,
    });
    fs::write(layout.rainbow.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    files.push("summary.json".into());
    artifacts::write_manifest(&layout.rainbow, "demo-rainbow", cfg, &files)
}
