use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use manf_core::checkpoint::{self, Checkpoint};
use manf_core::data::{load_csv, synth_generate, write_csv, CorruptionSpec, SeriesFrame};
use manf_core::model::quantile_sorted;
use manf_core::training::{self as tr, EpochRecord, EvalConfig, TrainState};
use manf_core::{ManfError, ManfModel, Rng};

use crate::config::RunConfig;
use crate::plot::{self, Bands};
use crate::{EvaluateArgs, Failure, ForecastArgs, SweepArgs, SweepParam, SynthArgs, TrainArgs};

type Res<T = ()> = Result<T, Failure>;

const QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

fn write(path: &Path, text: &str) -> Res {
    fs::write(path, text).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn mkdir(path: &Path) -> Res {
    fs::create_dir_all(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn load_frame(path: &Path) -> Res<SeriesFrame> {
    if !path.is_file() {
        return Err(Failure::io(format!("{}: no such data file", path.display())));
    }
    Ok(load_csv(path)?)
}

fn load_checkpoint(dir: &Path) -> Res<Checkpoint> {
    if !dir.is_dir() {
        return Err(Failure::io(format!("{}: no such checkpoint directory", dir.display())));
    }
    Ok(checkpoint::load(dir)?)
}

fn check_compatible(model: &ManfModel, frame: &SeriesFrame) -> Res {
    let c = &model.config;
    if frame.dims() != c.dims || frame.freq.num_features() != c.covariates {
        return Err(ManfError::DataMismatch(format!(
            "model expects {} series with {} covariates, data has {} series at {} frequency ({} covariates)",
            c.dims,
            c.covariates,
            frame.dims(),
            frame.freq.label(),
            frame.freq.num_features()
        ))
        .into());
    }
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Res {
    let frame = synth_generate(a.kind, a.dims as usize, a.steps as usize, a.noise, a.weekly, a.seed)?;
    write_csv(&frame, &a.out)?;
    println!(
        "dimension {} | frequency {} | total time steps {}",
        frame.dims(),
        frame.freq.label(),
        frame.len()
    );
    Ok(())
}

fn history_csv(history: &[EpochRecord]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("epoch,loss,crps_sum,mse\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.loss, opt(r.crps_sum), opt(r.mse));
    }
    s
}

pub fn train(a: &TrainArgs) -> Res {
    let cfg = RunConfig::load(&a.config)?;
    let frame = load_frame(&cfg.data)?;
    let ck_dir = cfg.output.join("checkpoint");
    let (mut model, mut state) = if a.resume {
        let ck = load_checkpoint(&ck_dir)?;
        if ck.model.config != cfg.model {
            return Err(ManfError::Incompatible("checkpoint model differs from the config's `model` section".into()).into());
        }
        let (state, _) = ck
            .train
            .ok_or_else(|| ManfError::Incompatible("checkpoint carries no training state".into()))?;
        (ck.model, state)
    } else {
        let model = ManfModel::new(cfg.model.clone())?;
        let state = TrainState::new(&model);
        (model, state)
    };
    check_compatible(&model, &frame)?;
    mkdir(&cfg.output)?;
    write(&cfg.output.join("config.json"), &cfg.to_json())?;
    let history = cfg.output.join("history.csv");

    let persist = |m: &ManfModel, st: &TrainState| -> manf_core::Result<()> {
        checkpoint::save(&ck_dir, m, Some((st, &cfg.train)))?;
        fs::write(&history, history_csv(&st.history))?;
        Ok(())
    };
    tr::train(&mut model, &frame, &cfg.train, &mut state, |m, st| {
        let r = st.history.last().expect("epoch recorded");
        eprintln!("epoch {}/{}: loss {:.5}", r.epoch, cfg.train.epochs, r.loss);
        persist(m, st)
    })?;
    persist(&model, &state)?;
    println!(
        "trained {} epochs ({} parameters); checkpoint at {}",
        state.epoch,
        model.num_params(),
        ck_dir.display()
    );
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> Res {
    let ck = load_checkpoint(&a.checkpoint)?;
    let frame = load_frame(&a.data)?;
    check_compatible(&ck.model, &frame)?;
    let cfg = EvalConfig {
        windows: a.scoring.windows,
        samples: a.scoring.samples as usize,
        seed: a.scoring.seed,
        normalized: a.scoring.normalized,
    };
    let spec = CorruptionSpec {
        horizon_multiplier: a.horizon_mult as usize,
        missing_fraction: a.missing,
        seed: a.corruption_seed,
    };
    spec.validate().map_err(|e| Failure::usage(e.to_string()))?;
    let report = tr::evaluate(&ck.model, &frame, &cfg, &spec)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    print!("{json}");
    if let Some(out) = &a.out {
        write(out, &json)?;
    }
    Ok(())
}

pub fn forecast(a: &ForecastArgs) -> Res {
    let ck = load_checkpoint(&a.checkpoint)?;
    let frame = load_frame(&a.data)?;
    let model = ck.model;
    check_compatible(&model, &frame)?;
    let (l, k, d) = (model.config.context(), model.config.horizon, model.config.dims);
    let start = a.start.unwrap_or(frame.len().saturating_sub(k));
    if start < l {
        return Err(ManfError::Coverage(format!("forecast start {start} leaves fewer than {l} context rows")).into());
    }
    if a.series.iter().any(|&s| s >= d) {
        return Err(Failure::usage(format!("--series must be below {d}")));
    }
    let window = frame.window(start - l, l, k)?;
    let f = model.forecast(&window, a.samples as usize, &mut Rng::new(a.seed))?;

    let mut rows = vec![[0.0; 5]; k * d];
    for t in 0..k {
        for s in 0..d {
            let mut m = f.marginal(t, s);
            m.sort_by(f64::total_cmp);
            rows[t * d + s] = QUANTILES.map(|q| quantile_sorted(&m, q));
        }
    }
    let actual = |t: usize, s: usize| {
        let i = (start + t) * d + s;
        frame.observed()[i].then(|| frame.values()[i])
    };

    mkdir(&a.out)?;
    let mut csv = String::from("t,series,q05,q25,q50,q75,q95,actual\n");
    for t in 0..k {
        for s in 0..d {
            let q = rows[t * d + s];
            let act = actual(t, s).map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(csv, "{},{s},{},{},{},{},{},{act}", start + t, q[0], q[1], q[2], q[3], q[4]);
        }
    }
    write(&a.out.join("quantiles.csv"), &csv)?;

    if a.plot {
        let series: Vec<usize> = if a.series.is_empty() { (0..d).collect() } else { a.series.clone() };
        let ts: Vec<usize> = (start..start + k).collect();
        for s in series {
            let q: Vec<[f64; 5]> = (0..k).map(|t| rows[t * d + s]).collect();
            let act: Vec<Option<f64>> = (0..k).map(|t| actual(t, s)).collect();
            let title = format!("series {s}: median, 50% and 90% intervals, ground truth");
            let svg = plot::svg(&Bands { t: &ts, q: &q, actual: &act, title: &title });
            write(&a.out.join(format!("series_{s}.svg")), &svg)?;
        }
    }
    println!("wrote {} forecast steps × {d} series to {}", k, a.out.display());
    Ok(())
}

fn apply(cfg: &mut RunConfig, param: SweepParam, value: &str) -> Res {
    let bad = || Failure::usage(format!("invalid value {value:?} for {}", param_name(param)));
    match param {
        SweepParam::BatchSize => cfg.train.batch_size = value.parse().map_err(|_| bad())?,
        SweepParam::Lr => cfg.train.lr = value.parse().map_err(|_| bad())?,
        SweepParam::Layers => {
            let n: usize = value.parse().map_err(|_| bad())?;
            cfg.model.enc_layers = n;
            cfg.model.dec_layers = n;
            cfg.model.scales = None;
        }
        SweepParam::HiddenDim => cfg.model.hidden_dim = value.parse().map_err(|_| bad())?,
    }
    cfg.model.validate().map_err(|e| Failure::usage(e.to_string()))?;
    cfg.train.validate().map_err(|e| Failure::usage(e.to_string()))?;
    Ok(())
}

fn param_name(p: SweepParam) -> &'static str {
    match p {
        SweepParam::BatchSize => "batch_size",
        SweepParam::Lr => "lr",
        SweepParam::Layers => "layers",
        SweepParam::HiddenDim => "hidden_dim",
    }
}

pub fn sweep(a: &SweepArgs) -> Res {
    let base = RunConfig::load(&a.config)?;
    let frame = load_frame(&base.data)?;
    let mut csv = String::from("param,value,crps_sum,mse\n");
    for value in &a.values {
        let mut cfg = base.clone();
        apply(&mut cfg, a.param, value)?;
        let mut model = ManfModel::new(cfg.model.clone())?;
        check_compatible(&model, &frame)?;
        let mut state = TrainState::new(&model);
        tr::train(&mut model, &frame, &cfg.train, &mut state, |_, _| Ok(()))?;
        let r = tr::evaluate(&model, &frame, &cfg.eval, &cfg.corruption)?;
        eprintln!("{}={value}: crps_sum {:.5}, mse {:.5}", param_name(a.param), r.crps_sum, r.mse);
        let _ = writeln!(csv, "{},{value},{},{}", param_name(a.param), r.crps_sum, r.mse);
    }
    write(&a.out, &csv)?;
    Ok(())
}
