use std::path::Path;

use condens::dataset::Dataset;
use condens::divergence::{DivKind, DivergenceConfig, Quadrature};
use condens::geometry::{PartitionKind, PartitionTree};
use condens::io::scenario::ScenarioConfig;
use condens::io::{self, FitMeta, ModelDocument, RunConfig};
use condens::polydens::{self, DegreeVector, FitOptions};
use condens::selection::{self, DpOptions, PenaltyMode};
use condens::simulate::{self, Estimator, RiskCurve, RiskRow, TruthDensity};
use condens::spatial_gmm::{self, CovarianceSpec, EmOptions, VolumeMode};
use condens::{Error, Result};

use crate::{load_config, out_dir, read_dataset, DivergenceFlags, SelectionFlags, Shared};

fn require_data(cfg: &RunConfig) -> Result<std::path::PathBuf> {
    cfg.data
        .as_ref()
        .map(std::path::PathBuf::from)
        .ok_or_else(|| Error::Contract("--data is required".into()))
}

fn parse_model_kind(kind: Option<&str>) -> Result<&'static str> {
    match kind.unwrap_or("poly") {
        "poly" => Ok("poly"),
        "gmm" => Ok("gmm"),
        other => Err(Error::Contract(format!("unknown model kind `{other}`"))),
    }
}

fn parse_cov_spec(name: Option<&str>) -> Result<CovarianceSpec> {
    match name.unwrap_or("free") {
        "free" => Ok(CovarianceSpec::free()),
        "common" => Ok(CovarianceSpec::common_covariance()),
        "common_volume" => {
            Ok(CovarianceSpec { volume: VolumeMode::Common, ..CovarianceSpec::free() })
        }
        other => Err(Error::Contract(format!("unknown covariance spec `{other}`"))),
    }
}

fn parse_penalty_mode(cfg: &RunConfig) -> Result<PenaltyMode> {
    match cfg.selection.penalty_mode.as_deref().unwrap_or("slope") {
        "slope" => Ok(PenaltyMode::Slope),
        "theoretical" => {
            let kappa = cfg.selection.kappa.ok_or_else(|| {
                Error::Contract("theoretical penalty mode requires --kappa".into())
            })?;
            Ok(PenaltyMode::Theoretical { kappa })
        }
        "manual" => {
            let kappa = cfg
                .selection
                .kappa
                .ok_or_else(|| Error::Contract("manual penalty mode requires --kappa".into()))?;
            Ok(PenaltyMode::Manual { kappa_tilde: kappa })
        }
        other => Err(Error::Contract(format!("unknown penalty mode `{other}`"))),
    }
}

fn parse_quadrature(flags: &DivergenceFlags, cfg: &RunConfig) -> Result<DivergenceConfig> {
    let mut out = DivergenceConfig::default();
    if let Some(rho) = flags.rho.or(cfg.divergence.rho) {
        out.rho = rho;
    }
    let spec = flags.quadrature.clone().or_else(|| cfg.divergence.quadrature.clone());
    if let Some(spec) = spec {
        let (kind, count) = spec
            .split_once(':')
            .ok_or_else(|| Error::Contract("quadrature must be grid:<n> or mc:<n>".into()))?;
        let count: usize = count
            .parse()
            .map_err(|_| Error::Contract(format!("bad quadrature count `{count}`")))?;
        out.quadrature = match kind {
            "grid" => Quadrature::Grid { points_per_axis: count },
            "mc" => Quadrature::MonteCarlo { samples: count, seed: 0 },
            other => return Err(Error::Contract(format!("unknown quadrature `{other}`"))),
        };
    }
    out.validate()?;
    Ok(out)
}

fn write_report(dir: &Path, name: &str, lines: &[String]) -> Result<()> {
    std::fs::write(dir.join(name), lines.join("\n") + "\n")?;
    Ok(())
}

pub fn cmd_fit(
    shared: &Shared,
    model: Option<String>,
    x_depth: Option<u32>,
    y_depth: Option<u32>,
    degree: Option<Vec<i64>>,
    k: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(shared)?;
    if model.is_some() {
        cfg.model = model;
    }
    if x_depth.is_some() {
        cfg.fit.x_depth = x_depth;
    }
    if y_depth.is_some() {
        cfg.fit.y_depth = y_depth;
    }
    if let Some(deg) = degree {
        let checked: Vec<usize> = deg
            .iter()
            .map(|&d| {
                usize::try_from(d)
                    .map_err(|_| Error::Contract(format!("invalid degree {d}: must be >= 0")))
            })
            .collect::<Result<_>>()?;
        cfg.fit.degree = Some(checked);
    }
    if k.is_some() {
        cfg.fit.k = k;
    }
    let kind = parse_model_kind(cfg.model.as_deref())?;
    let (data, _) = read_dataset(&require_data(&cfg)?)?;
    let dir = out_dir(&cfg)?;
    let seed = cfg.seed.unwrap_or(0);
    // A rule size large enough that the requested uniform shape is a member
    // of its collection, so the saved document re-validates on load.
    let rule_for = |d: usize, depth: u32| -> Result<usize> {
        if d as u32 * depth > 40 {
            return Err(Error::Contract(format!("depth {depth} too deep for dimension {d}")));
        }
        Ok(data.len().max(1usize << (d as u32 * depth)))
    };

    let x_depth = cfg.fit.x_depth.unwrap_or(0);
    let x_tree =
        PartitionTree::uniform(PartitionKind::Udp, rule_for(data.d_x, x_depth)?, data.d_x, x_depth);
    let (doc, lines) = match kind {
        "poly" => {
            let degree = DegreeVector(cfg.fit.degree.clone().unwrap_or_else(|| vec![0; data.d_y]));
            let y_depth = cfg.fit.y_depth.unwrap_or(0);
            let y_tree = PartitionTree::uniform(
                PartitionKind::Udp,
                rule_for(data.d_y, y_depth)?,
                data.d_y,
                y_depth,
            );
            let y_trees = vec![y_tree; x_tree.num_leaves()];
            let opts = FitOptions { seed, ..Default::default() };
            let model = polydens::fit(&data, &x_tree, &y_trees, &degree, &opts)?;
            let neg_loglik = model.neg_loglik(&data)?;
            let (dim, _) = model.dimension();
            let meta = FitMeta { n: data.len(), loglik: -neg_loglik, penalty: 0.0, score: neg_loglik, seed };
            let doc = ModelDocument::from_poly(&model, meta);
            let lines = vec![
                "model: poly".to_string(),
                format!("n: {}", data.len()),
                format!("dim: {dim}"),
                format!("loglik: {}", -neg_loglik),
                "penalty: 0".to_string(),
            ];
            (doc, lines)
        }
        _ => {
            let k = cfg.fit.k.unwrap_or(2);
            let opts = EmOptions { seed, ..Default::default() };
            let spec = parse_cov_spec(cfg.selection.cov_spec.as_deref())?;
            let fit = spatial_gmm::em_fit(&data, &x_tree, k, &spec, &opts)?;
            let dim =
                spatial_gmm::dimension(x_tree.num_leaves(), k, &spec, data.d_y, data.d_y);
            let meta = FitMeta {
                n: data.len(),
                loglik: fit.loglik(),
                penalty: 0.0,
                score: -fit.loglik(),
                seed,
            };
            let doc = ModelDocument::from_gmm(&fit.model, meta);
            let lines = vec![
                "model: gmm".to_string(),
                format!("n: {}", data.len()),
                format!("K: {k}"),
                format!("dim: {dim}"),
                format!("loglik: {}", fit.loglik()),
                format!("em_iterations: {}", fit.loglik_trace.len()),
            ];
            (doc, lines)
        }
    };
    std::fs::write(dir.join("model.json"), doc.to_json())?;
    write_report(&dir, "report.txt", &lines)?;
    Ok(())
}

pub fn cmd_select(shared: &Shared, model: Option<String>, flags: &SelectionFlags) -> Result<()> {
    let mut cfg = load_config(shared)?;
    if model.is_some() {
        cfg.model = model;
    }
    let sel = &mut cfg.selection;
    if flags.collection_x.is_some() {
        sel.collection_x = flags.collection_x.clone();
    }
    if flags.collection_y.is_some() {
        sel.collection_y = flags.collection_y.clone();
    }
    if flags.degrees.is_some() {
        sel.degrees = flags.degrees.clone();
    }
    if flags.k_range.is_some() {
        sel.k_range = flags.k_range.clone();
    }
    if flags.cov_spec.is_some() {
        sel.cov_spec = flags.cov_spec.clone();
    }
    if flags.penalty_mode.is_some() {
        sel.penalty_mode = flags.penalty_mode.clone();
    }
    if flags.kappa.is_some() {
        sel.kappa = flags.kappa;
    }
    if flags.rule_n.is_some() {
        sel.rule_n = flags.rule_n;
    }

    let kind = parse_model_kind(cfg.model.as_deref())?;
    let (data, _) = read_dataset(&require_data(&cfg)?)?;
    let dir = out_dir(&cfg)?;
    let seed = cfg.seed.unwrap_or(0);
    let mode = parse_penalty_mode(&cfg)?;
    let rule_n = cfg.selection.rule_n.unwrap_or(data.len());
    let kind_x = PartitionKind::parse(cfg.selection.collection_x.as_deref().unwrap_or("rdp"))?;

    match kind {
        "poly" => {
            let kind_y = PartitionKind::parse(cfg.selection.collection_y.as_deref().unwrap_or("rdp"))?;
            let degrees: Vec<DegreeVector> = cfg
                .selection
                .degrees
                .clone()
                .unwrap_or_else(|| vec![0])
                .into_iter()
                .map(|r| DegreeVector(vec![r; data.d_y]))
                .collect();
            let opts = DpOptions { fit: FitOptions { seed, ..Default::default() }, ..Default::default() };
            let (report, model) =
                selection::dp_select_poly(&data, kind_x, kind_y, &degrees, &mode, rule_n, &opts)?;
            let chosen = report.chosen_record();
            let meta = FitMeta {
                n: data.len(),
                loglik: -chosen.neg_loglik,
                penalty: chosen.penalty,
                score: chosen.score,
                seed,
            };
            std::fs::write(dir.join("selection.csv"), io::selection_report_to_csv(&report))?;
            std::fs::write(dir.join("model.json"), ModelDocument::from_poly(&model, meta).to_json())?;
            let mut lines = vec![
                "model: poly".to_string(),
                format!("chosen: {}", chosen.id),
                format!("dim: {}", chosen.dim),
                format!("loglik: {}", -chosen.neg_loglik),
                format!("penalty: {}", chosen.penalty),
                format!("score: {}", chosen.score),
            ];
            if let Some(diag) = &report.slope {
                lines.push(format!("kappa_hat: {}", diag.kappa_hat));
                std::fs::write(dir.join("slope.csv"), io::slope_sweep_to_csv(diag))?;
            }
            write_report(&dir, "report.txt", &lines)?;
        }
        _ => {
            let k_range = cfg.selection.k_range.clone().unwrap_or_else(|| vec![1, 2, 3]);
            let spec = parse_cov_spec(cfg.selection.cov_spec.as_deref())?;
            let em = EmOptions { seed, ..Default::default() };
            let dp = DpOptions::default();
            let (report, fit) = selection::dp_select_gmm(
                &data,
                kind_x,
                &k_range,
                &[spec],
                &[],
                &mode,
                rule_n,
                &em,
                &dp,
            )?;
            let chosen = report.chosen_record();
            let meta = FitMeta {
                n: data.len(),
                loglik: fit.loglik(),
                penalty: chosen.penalty,
                score: chosen.score,
                seed,
            };
            std::fs::write(dir.join("selection.csv"), io::selection_report_to_csv(&report))?;
            std::fs::write(dir.join("model.json"), ModelDocument::from_gmm(&fit.model, meta).to_json())?;
            let mut lines = vec![
                "model: gmm".to_string(),
                format!("chosen: {}", chosen.id),
                format!("K: {}", fit.model.k),
                format!("dim: {}", chosen.dim),
                format!("loglik: {}", fit.loglik()),
                format!("penalty: {}", chosen.penalty),
                format!("score: {}", chosen.score),
            ];
            if let Some(diag) = &report.slope {
                lines.push(format!("kappa_hat: {}", diag.kappa_hat));
                std::fs::write(dir.join("slope.csv"), io::slope_sweep_to_csv(diag))?;
            }
            write_report(&dir, "report.txt", &lines)?;
        }
    }
    Ok(())
}

pub fn cmd_segment(shared: &Shared, model_file: &Path) -> Result<()> {
    let cfg = load_config(shared)?;
    let (data, grid) = read_dataset(&require_data(&cfg)?)?;
    let dir = out_dir(&cfg)?;
    let text = std::fs::read_to_string(model_file)?;
    let doc = ModelDocument::from_json(&text)?;
    let model = doc.to_gmm()?;
    let labels = model.segment(&data)?;
    let csv = match grid {
        Some((h, w)) => io::labels_to_grid_csv(&labels, h, w),
        None => io::labels_to_csv(&labels),
    };
    std::fs::write(dir.join("labels.csv"), csv)?;
    Ok(())
}

pub fn cmd_simulate(shared: &Shared, scenario: &Path, n: Option<usize>) -> Result<()> {
    let cfg = load_config(shared)?;
    let dir = out_dir(&cfg)?;
    let scenario = ScenarioConfig::from_toml_str(&std::fs::read_to_string(scenario)?)?;
    let truth = scenario.build_truth()?;
    let n = n
        .or(cfg.simulate.n)
        .or_else(|| scenario.risk.ns.as_ref().and_then(|ns| ns.first().copied()))
        .unwrap_or(1000);
    let seed = cfg.seed.or(scenario.risk.seed).unwrap_or(0);
    let data = simulate::sample(&truth, n, seed)?;
    std::fs::write(dir.join("dataset.csv"), io::dataset_to_csv(&data))?;
    Ok(())
}

pub fn cmd_risk(shared: &Shared, scenario_path: &Path, div: &DivergenceFlags) -> Result<()> {
    let cfg = load_config(shared)?;
    let dir = out_dir(&cfg)?;
    let scenario = ScenarioConfig::from_toml_str(&std::fs::read_to_string(scenario_path)?)?;
    let truth = scenario.build_truth()?;
    let div_cfg = {
        let mut c = parse_quadrature(div, &cfg)?;
        if let Some(rho) = scenario.risk.rho {
            if div.rho.is_none() {
                c.rho = rho;
            }
        }
        c
    };
    let ns = scenario.risk.ns.clone().unwrap_or_else(|| vec![200, 800, 3200]);
    let replicates = cfg.simulate.replicates.or(scenario.risk.replicates).unwrap_or(10);
    let seed = cfg.seed.or(scenario.risk.seed).unwrap_or(0);
    let y_domain = response_domain(&truth);

    let mut curve = RiskCurve::default();
    match scenario.estimator.kind.as_str() {
        "hist_grid" => {
            let grid = scenario.hist_grid()?;
            for &n in &ns {
                let table = simulate::oracle_table(
                    &truth,
                    &grid,
                    |pair, data| ScenarioConfig::fit_hist(pair, data),
                    n,
                    replicates,
                    &div_cfg,
                    &y_domain,
                    seed,
                )?;
                for row in &table.rows {
                    curve.rows.push(RiskRow {
                        n,
                        label: row.id.clone(),
                        mean_risk: row.mean_risk,
                        std_error: row.risk_std_error,
                        replicates,
                    });
                }
                curve.rows.push(RiskRow {
                    n,
                    label: "selected".into(),
                    mean_risk: table.selected_risk,
                    std_error: table.selected_risk_std_error,
                    replicates,
                });
            }
        }
        "truth" => {
            for &n in &ns {
                let row = simulate::risk(
                    &truth,
                    &Estimator::Truth,
                    n,
                    replicates.max(3),
                    DivKind::Jkl,
                    &div_cfg,
                    &y_domain,
                    seed,
                )?;
                curve.rows.push(row);
            }
        }
        "poly_dp" => {
            let kind_x =
                PartitionKind::parse(scenario.estimator.collection_x.as_deref().unwrap_or("rdp"))?;
            let kind_y =
                PartitionKind::parse(scenario.estimator.collection_y.as_deref().unwrap_or("udp"))?;
            let degrees: Vec<condens::polydens::DegreeVector> = scenario
                .estimator
                .degrees
                .clone()
                .unwrap_or_else(|| vec![0])
                .into_iter()
                .map(|r| condens::polydens::DegreeVector(vec![r; truth.y_dim()]))
                .collect();
            let mode = match scenario.estimator.penalty_mode.as_deref().unwrap_or("slope") {
                "slope" => PenaltyMode::Slope,
                "manual" => PenaltyMode::Manual {
                    kappa_tilde: scenario.estimator.kappa.unwrap_or(1.0),
                },
                other => {
                    return Err(Error::Contract(format!(
                        "estimator penalty mode `{other}` not supported in scenarios"
                    )))
                }
            };
            for &n in &ns {
                let degrees = degrees.clone();
                let mode = mode.clone();
                let estimator = Estimator::Fit(Box::new(move |data: &Dataset| {
                    let (_, model) = selection::dp_select_poly(
                        data,
                        kind_x,
                        kind_y,
                        &degrees,
                        &mode,
                        data.len(),
                        &DpOptions::default(),
                    )?;
                    Ok(TruthDensity::Poly(model))
                }));
                let row = simulate::risk(
                    &truth,
                    &estimator,
                    n,
                    replicates.max(3),
                    DivKind::Jkl,
                    &div_cfg,
                    &y_domain,
                    seed,
                )?;
                curve.rows.push(RiskRow { label: "selected".into(), ..row });
            }
        }
        "gmm_select" => {
            let k_range = scenario.estimator.k_range.clone().unwrap_or_else(|| vec![1, 2, 3]);
            let spec = parse_cov_spec(scenario.estimator.cov_spec.as_deref())?;
            let kappa = scenario.estimator.kappa.unwrap_or(1.0);
            for &n in &ns {
                let k_range = k_range.clone();
                let spec = spec.clone();
                let estimator = Estimator::Fit(Box::new(move |data: &Dataset| {
                    let (_, fit) = selection::dp_select_gmm(
                        data,
                        PartitionKind::Rdp,
                        &k_range,
                        &[spec.clone()],
                        &[],
                        &PenaltyMode::Manual { kappa_tilde: kappa },
                        data.len(),
                        &EmOptions::default(),
                        &DpOptions::default(),
                    )?;
                    Ok(TruthDensity::Gmm(fit.model))
                }));
                let row = simulate::risk(
                    &truth,
                    &estimator,
                    n,
                    replicates.max(3),
                    DivKind::Jkl,
                    &div_cfg,
                    &y_domain,
                    seed,
                )?;
                curve.rows.push(RiskRow { label: "selected".into(), ..row });
            }
        }
        other => return Err(Error::Contract(format!("unknown estimator kind `{other}`"))),
    }
    std::fs::write(dir.join("risk.csv"), io::risk_curve_to_csv(&curve))?;
    Ok(())
}

pub fn cmd_slope(shared: &Shared, scenario_path: &Path, n: Option<usize>) -> Result<()> {
    let cfg = load_config(shared)?;
    let dir = out_dir(&cfg)?;
    let scenario = ScenarioConfig::from_toml_str(&std::fs::read_to_string(scenario_path)?)?;
    let truth = scenario.build_truth()?;
    let n = n
        .or(cfg.simulate.n)
        .or_else(|| scenario.risk.ns.as_ref().and_then(|ns| ns.first().copied()))
        .unwrap_or(2000);
    let seed = cfg.seed.or(scenario.risk.seed).unwrap_or(0);
    let data = simulate::sample(&truth, n, seed)?;
    let grid = scenario.hist_grid()?;
    let mut pairs = Vec::with_capacity(grid.len());
    for (_, pair) in &grid {
        let (fitted, dim) = ScenarioConfig::fit_hist(pair, &data)?;
        let nll: f64 = data
            .x
            .iter()
            .zip(&data.y)
            .map(|(x, y)| {
                -match &fitted {
                    TruthDensity::Poly(m) => {
                        condens::divergence::ConditionalDensity::log_density(m, x, y)
                    }
                    _ => unreachable!(),
                }
            })
            .sum();
        pairs.push((dim as f64, nll));
    }
    let (kappa_hat, diag) = selection::slope_calibrate(&pairs)?;
    std::fs::write(dir.join("slope.csv"), io::slope_sweep_to_csv(&diag))?;
    write_report(
        &dir,
        "slope.txt",
        &[
            format!("kappa_hat: {kappa_hat}"),
            format!("recommended_kappa: {}", 2.0 * kappa_hat),
            format!("dimension_jump_at: {}", diag.jump_kappa),
        ],
    )?;
    Ok(())
}

fn response_domain(truth: &simulate::GroundTruth) -> condens::geometry::Hyperrectangle {
    match &truth.density {
        TruthDensity::Poly(_) => condens::geometry::Hyperrectangle::unit_cube(truth.y_dim()),
        _ => condens::geometry::Hyperrectangle::new(
            vec![-12.0; truth.y_dim()],
            vec![12.0; truth.y_dim()],
        )
        .expect("static bounds"),
    }
}
