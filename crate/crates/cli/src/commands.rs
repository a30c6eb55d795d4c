//! The five subcommands.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use anyhow::{Context, Result};
use log::info;
use serde::Serialize;
use thermosleep::geo::LatLon;
use thermosleep::panel_engine::{fit, fit_from_json, fit_to_json, FitResult};
use thermosleep::plot::{render_curve_svg, render_map_svg};
use thermosleep::projection::{
    country_aggregate, ensemble_aggregate, equal_area_average, fit_spline, project_all, read_country_mask,
    read_projection_csv, read_scenario_csv, scenario_grids, write_country_csv, write_ensemble_csv,
    write_projection_csv, LossGrid, SplineModel,
};
use thermosleep::response_models::{
    build_design, default_schemes, join_nights, marginal_effects, read_curve_csv, read_users_csv, write_curve_csv,
    write_users_csv, BinnedTerm, Design, DesignExclusions, Interaction, Treatment,
};
use thermosleep::sleep_ingest::{
    aggregate_all, apply_filters, read_epochs_csv, write_epochs_csv, write_sleep_records_csv, ClockWindow,
    ExclusionReport,
};
use thermosleep::synth::generate;
use thermosleep::weather_link::{
    assemble_exposures, normal_requests, read_grid_csv, read_stations_csv, write_exposures_csv, write_grid_csv,
    write_stations_csv, GridArchive, NormalsTable, StationArchive,
};
use thermosleep::Error;

use crate::config::{required, RunConfig};
use crate::manifest::{Manifest, OutDir};

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn name(path: &Path) -> String {
    path.display().to_string()
}

/// Fail before doing any work if a needed input is missing.
pub fn check_inputs(paths: &[&Path]) -> Result<(), Error> {
    for p in paths {
        if !p.is_file() {
            return Err(Error::Validation(format!("input file {} does not exist", p.display())));
        }
    }
    Ok(())
}

pub fn synth(cfg: &RunConfig, seed: u64, out: &mut OutDir) -> Result<()> {
    let world = generate(&cfg.synth, seed)?;
    info!(
        "synthesized {} users, {} nights, {} station-days",
        world.users.len(),
        world.truth.n_nights,
        world.stations.len()
    );
    out.write_with("epochs.csv", |w| write_epochs_csv(w, &world.epochs))?;
    out.write_with("stations.csv", |w| write_stations_csv(w, &world.stations))?;
    out.write_with("grid.csv", |w| write_grid_csv(w, &world.grid))?;
    out.write_with("users.csv", |w| write_users_csv(w, &world.users))?;
    out.write_json("truth.json", &world.truth)?;
    Ok(())
}

#[derive(Serialize)]
struct Exclusions<'a> {
    records: &'a ExclusionReport,
    design: &'a DesignExclusions,
    empty_bins: BTreeMap<String, Vec<String>>,
}

struct Estimation {
    design: Design,
    fit: FitResult,
}

fn empty_bin_labels(terms: &[&BinnedTerm]) -> BTreeMap<String, Vec<String>> {
    terms
        .iter()
        .filter(|t| !t.empty_bins.is_empty())
        .map(|t| {
            (
                t.scheme.variable.clone(),
                t.empty_bins.iter().map(|&b| t.scheme.label(b)).collect(),
            )
        })
        .collect()
}

/// Epochs to nightly records, exposures, design and fit. Intermediate tables
/// are written alongside.
fn estimate(cfg: &RunConfig, out: &mut OutDir, manifest: &mut Manifest) -> Result<Estimation> {
    let epochs_p = required(&cfg.inputs.epochs, "epochs")?;
    let stations_p = required(&cfg.inputs.stations, "stations")?;
    let users_p = required(&cfg.inputs.users, "users")?;
    let mut paths = vec![epochs_p, stations_p, users_p];
    if let Some(g) = cfg.inputs.grid.as_deref() {
        paths.push(g);
    }
    check_inputs(&paths)?;
    for p in &paths {
        manifest.add_input(p)?;
    }

    let streams = read_epochs_csv(open(epochs_p)?, &name(epochs_p))?;
    let records = aggregate_all(&streams, ClockWindow::default(), cfg.ingest.bridge_gap_min)?;
    let filtered = apply_filters(&records, &cfg.filters.inclusion());
    info!(
        "{} nightly records, {} kept from {} users",
        records.len(),
        filtered.report.records_kept,
        filtered.report.users_kept
    );
    out.write_with("sleep_records.csv", |w| write_sleep_records_csv(w, &filtered.kept))?;
    if filtered.kept.is_empty() {
        return Err(Error::Validation("no records survive the inclusion filters".into()).into());
    }

    let users = read_users_csv(open(users_p)?, &name(users_p))?;
    let sites: HashMap<String, LatLon> = users
        .iter()
        .map(|u| (u.user_id.clone(), LatLon::new(u.lat, u.lon)))
        .collect();
    let archive = StationArchive::from_days(read_stations_csv(open(stations_p)?, &name(stations_p))?)?;
    let grid = match cfg.inputs.grid.as_deref() {
        Some(p) => Some(GridArchive::from_days(read_grid_csv(open(p)?, &name(p))?)?),
        None => None,
    };
    let exposure = cfg.exposure.config();
    let normals = NormalsTable::build(
        &normal_requests(&filtered.kept, &sites),
        &archive,
        grid.as_ref(),
        exposure,
    );
    let exposures = assemble_exposures(&filtered.kept, &sites, &archive, grid.as_ref(), &normals, exposure)?;
    out.write_with("exposures.csv", |w| write_exposures_csv(w, &exposures))?;

    let rows = join_nights(&filtered.kept, &exposures, &users)?;
    let design = build_design(&cfg.model, &rows, &default_schemes())?;
    info!(
        "design: {} rows, {} regressors",
        design.panel.n_rows(),
        design.panel.names.len()
    );
    let mut terms: Vec<&BinnedTerm> = design.treatment_term.iter().collect();
    terms.extend(design.control_terms.iter());
    out.write_json(
        "exclusions.json",
        &Exclusions {
            records: &filtered.report,
            design: &design.excluded,
            empty_bins: empty_bin_labels(&terms),
        },
    )?;

    let fitted = fit(&design.panel, &cfg.estimation.fit_options())?;
    out.write("fit.json", fit_to_json(&fitted)?.as_bytes())?;
    Ok(Estimation { design, fit: fitted })
}

pub fn run_fit(cfg: &RunConfig, out: &mut OutDir, manifest: &mut Manifest) -> Result<()> {
    if cfg.estimation.spline && cfg.model.treatment != Treatment::TminLinear {
        return Err(Error::Validation("estimation.spline needs model.treatment = \"tmin_linear\"".into()).into());
    }
    let est = estimate(cfg, out, manifest)?;
    if let Some(term) = &est.design.treatment_term {
        let curve = thermosleep::response_models::ResponseCurve::from_fit(
            &est.fit,
            term,
            cfg.model.outcome.is_probability(),
        );
        out.write_with("curve.csv", |w| write_curve_csv(w, &curve))?;
    }
    if cfg.estimation.spline {
        let (model, spline_fit) = fit_spline(&est.design.panel, "tmin", &cfg.estimation.fit_options())?;
        info!("spline segment slopes {:?}", model.segment_slopes());
        out.write("spline.json", fit_to_json(&spline_fit)?.as_bytes())?;
    }
    Ok(())
}

pub fn run_margins(cfg: &RunConfig, out: &mut OutDir, manifest: &mut Manifest) -> Result<()> {
    if cfg.model.interaction == Interaction::None {
        return Err(Error::Validation("margins needs model.interaction to be set".into()).into());
    }
    let est = estimate(cfg, out, manifest)?;
    let base = if cfg.model.treatment.is_anomaly() { "tmin_anomaly" } else { "tmin" };
    let me = marginal_effects(&est.fit, base, &est.design.categories)?;
    out.write_json("margins.json", &me)?;
    Ok(())
}

#[derive(Serialize)]
struct ModelLoss {
    model: String,
    loss_hours: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    loss_nights: Option<f64>,
}

#[derive(Serialize)]
struct YearSummary {
    year: i32,
    n_models: usize,
    ensemble_loss_hours: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    ensemble_loss_nights: Option<f64>,
    models: Vec<ModelLoss>,
}

#[derive(Serialize)]
struct ProjectionSummary {
    baseline_year: i32,
    segment_slopes: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    average_night_hours: Option<f64>,
    years: Vec<YearSummary>,
}

pub fn run_project(cfg: &RunConfig, out: &mut OutDir, manifest: &mut Manifest) -> Result<()> {
    let pc = &cfg.project;
    let scen_p = required(&cfg.inputs.scenarios, "scenarios")?;
    let mut paths = vec![scen_p];
    paths.extend(cfg.inputs.spline.as_deref());
    paths.extend(cfg.inputs.countries.as_deref());
    check_inputs(&paths)?;
    for p in &paths {
        manifest.add_input(p)?;
    }

    let model = match (&cfg.inputs.spline, pc.slopes) {
        (Some(p), None) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            SplineModel::from_fit(&fit_from_json(&text)?)?
        }
        (None, Some(s)) => SplineModel::from_segment_slopes(s),
        (Some(_), Some(_)) => {
            return Err(Error::Validation("give either inputs.spline or project.slopes, not both".into()).into())
        }
        (None, None) => return Err(Error::Validation("projection needs inputs.spline or project.slopes".into()).into()),
    };

    let rows = read_scenario_csv(open(scen_p)?, &name(scen_p))?;
    let grids = scenario_grids(rows, pc.model.as_deref(), pc.year)?;
    let losses: Vec<LossGrid> = project_all(&model, &grids, pc.baseline_year)?
        .into_iter()
        .filter(|g| g.year != pc.baseline_year)
        .collect();
    if losses.is_empty() {
        return Err(Error::Validation(format!("scenario file has no years besides the {} baseline", pc.baseline_year)).into());
    }
    out.write_with("projection.csv", |w| write_projection_csv(w, &losses))?;

    let mut by_year: BTreeMap<i32, Vec<LossGrid>> = BTreeMap::new();
    for g in &losses {
        by_year.entry(g.year).or_default().push(g.clone());
    }
    let nights = |h: f64| pc.average_night_hours.map(|d| h / d);
    let mut ensembles = Vec::new();
    let mut years = Vec::new();
    for (&year, gs) in &by_year {
        let ens = ensemble_aggregate(gs)?;
        let global = equal_area_average(&ens.cells.iter().map(|c| (c.lat, c.mean)).collect::<Vec<_>>())?;
        years.push(YearSummary {
            year,
            n_models: ens.n_models,
            ensemble_loss_hours: global,
            ensemble_loss_nights: nights(global),
            models: ens
                .model_globals
                .iter()
                .map(|(m, h)| ModelLoss {
                    model: m.clone(),
                    loss_hours: *h,
                    loss_nights: nights(*h),
                })
                .collect(),
        });
        ensembles.push(ens);
    }
    out.write_with("projection_ensemble.csv", |w| write_ensemble_csv(w, &ensembles))?;

    if let Some(p) = cfg.inputs.countries.as_deref() {
        let mask = read_country_mask(open(p)?, &name(p))?;
        let mut rows = Vec::new();
        for (&year, gs) in &by_year {
            for (iso, v) in country_aggregate(gs, &mask)? {
                rows.push((iso, year, v));
            }
        }
        out.write_with("country_loss.csv", |w| write_country_csv(w, &rows))?;
    }

    out.write_json(
        "projection_summary.json",
        &ProjectionSummary {
            baseline_year: pc.baseline_year,
            segment_slopes: model.segment_slopes(),
            average_night_hours: pc.average_night_hours,
            years,
        },
    )?;
    Ok(())
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

pub fn run_plot(cfg: &RunConfig, out: &mut OutDir, manifest: &mut Manifest) -> Result<()> {
    let p = required(&cfg.inputs.plot, "plot")?;
    check_inputs(&[p])?;
    manifest.add_input(p)?;
    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    let header = text.lines().next().unwrap_or("");
    let title = cfg.plot.title.as_deref();
    if header.split(',').any(|h| h.trim() == "loss_hours") {
        let grids = read_projection_csv(text.as_bytes(), &name(p))?;
        if grids.is_empty() {
            return Err(Error::Validation(format!("{} has no rows", p.display())).into());
        }
        for g in &grids {
            let t = title.map_or_else(|| format!("Annual sleep loss, {} {}", g.model, g.year), str::to_string);
            let svg = render_map_svg(&g.cells, &t, "hours/year")?;
            out.write(&format!("map_{}_{}.svg", slug(&g.model), g.year), svg.as_bytes())?;
        }
    } else {
        let curve = read_curve_csv(text.as_bytes(), &name(p))?;
        let t = title.unwrap_or("Sleep response by nighttime temperature");
        let svg = render_curve_svg(&curve, t, &cfg.plot.y_label)?;
        out.write("curve.svg", svg.as_bytes())?;
    }
    Ok(())
}
