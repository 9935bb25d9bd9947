use std::io::Write;

use dpfb::data::{
    domain_split, load_csv, normalize, synth_generate, window, write_csv, Normalization, Schema, SynthConfig,
    SynthSystem, TimeSeriesDataset,
};
use dpfb::objective::Domain;
use dpfb::{Error, Tensor};
use proptest::prelude::*;

fn schema_xy() -> Schema {
    Schema::parse("a = data\nb = data\nt = label\n").unwrap()
}

fn write_file(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
    let path = dir.path().join(name);
    let mut f = std::fs::File::create(&path).unwrap();
    f.write_all(text.as_bytes()).unwrap();
    path
}

#[test]
fn three_row_file_loads_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_file(&dir, "d.csv", "t,a,extra,b\n1.5,0.25,9,-3\n2.5,1e-3,9,4\n-0.5,7,9,0\n");
    let d = load_csv(&path, &schema_xy()).unwrap();
    assert_eq!(d.len(), 3);
    assert_eq!(d.x, Tensor::from_rows(&[vec![0.25, -3.0], vec![1e-3, 4.0], vec![7.0, 0.0]]).unwrap());
    assert_eq!(d.y, Tensor::from_rows(&[vec![1.5], vec![2.5], vec![-0.5]]).unwrap());
    assert_eq!(d.x_names, vec!["a", "b"]);
}

#[test]
fn missing_label_column_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_file(&dir, "d.csv", "a,b\n1,2\n");
    match load_csv(&path, &schema_xy()) {
        Err(Error::Schema(m)) => assert!(m.contains("missing column t"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn bad_cells_report_row_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_file(&dir, "d.csv", "a,b,t\n1,2,3\n4,oops,6\n");
    match load_csv(&path, &schema_xy()) {
        Err(Error::Parse { row, column, .. }) => {
            assert_eq!(row, 2);
            assert_eq!(column, "b");
        }
        other => panic!("{other:?}"),
    }
    let path = write_file(&dir, "r.csv", "a,b,t\n1,2,3\n4,5\n");
    assert!(matches!(load_csv(&path, &schema_xy()), Err(Error::Parse { row: 2, .. })));
    assert!(matches!(
        load_csv(&dir.path().join("absent.csv"), &schema_xy()),
        Err(Error::Io { .. })
    ));
}

#[test]
fn csv_round_trip_is_lossless() {
    let mut cfg = SynthConfig::small();
    cfg.length = 500;
    let d = synth_generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    write_csv(&path, &d).unwrap();
    let back = load_csv(&path, &cfg.schema()).unwrap();
    assert!(back.x.max_abs_diff(&d.x) <= 1e-12);
    assert!(back.y.max_abs_diff(&d.y) <= 1e-12);
}

fn two_column(values: &[f64]) -> TimeSeriesDataset {
    let n = values.len();
    TimeSeriesDataset::new(
        Tensor::from_fn(n, 1, |r, _| (r as f64).sin()),
        Tensor::from_vec(n, 1, values.to_vec()).unwrap(),
        vec!["u".into()],
        vec!["flow".into()],
    )
    .unwrap()
}

#[test]
fn domain_rule_is_inclusive() {
    let d = two_column(&[0.0278, 0.03, 0.0347, 0.0417, 0.0208]);
    let m = domain_split(&d, "flow", 0.0278, 0.0347).unwrap();
    assert_eq!(
        m.steps(),
        &[Domain::Source, Domain::Source, Domain::Source, Domain::Target, Domain::Target]
    );
    assert!((m.source_fraction() - 0.6).abs() < 1e-15);
    let inside = two_column(&[0.03, 0.031]);
    assert_eq!(domain_split(&inside, "flow", 0.0278, 0.0347).unwrap().source_fraction(), 1.0);
    assert!(domain_split(&d, "absent", 0.0, 1.0).is_err());
}

#[test]
fn windows_tile_the_prefix() {
    let mut cfg = SynthConfig::small();
    cfg.length = 250;
    let d = synth_generate(&cfg).unwrap();
    let ws = window(&d, 100).unwrap();
    assert_eq!(ws.len(), 2);
    let xs: Vec<&Tensor> = ws.iter().map(|w| &w.x).collect();
    assert_eq!(Tensor::vcat(&xs).unwrap(), d.x.slice_rows(0, 200));
    for (k, w) in ws.iter().enumerate() {
        for n in 0..100 {
            assert_eq!(w.mask.get(n), d.domain.get(k * 100 + n));
            assert_eq!(w.y.row(n), d.y.row(k * 100 + n));
        }
    }
    assert!(window(&d, 251).is_err());
}

#[test]
fn normalization_uses_fitting_subset_only() {
    let mut cfg = SynthConfig::small();
    cfg.length = 400;
    let train = synth_generate(&cfg).unwrap();
    cfg.seed = 99;
    let test = synth_generate(&cfg).unwrap();
    let (norm_train, stats) = normalize(&train, &train).unwrap();
    for c in 0..norm_train.x.cols() {
        let col = norm_train.x.column(c);
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
        assert!(mean.abs() < 1e-10 && (var.sqrt() - 1.0).abs() < 1e-10);
    }
    let norm_test = stats.apply(&test).unwrap();
    assert_eq!(Normalization::fit(&train).unwrap(), stats);
    let back = stats.invert(&norm_test).unwrap();
    assert!(back.x.max_abs_diff(&test.x) < 1e-12);
    assert!(back.y.max_abs_diff(&test.y) < 1e-12);

    let mut shifted = train.clone();
    for r in 0..shifted.len() {
        let v = shifted.x.get(r, 1);
        shifted.x.set(r, 1, v + 5.0);
    }
    let s2 = Normalization::fit(&shifted).unwrap();
    assert!((s2.x_mean[1] - stats.x_mean[1] - 5.0).abs() < 1e-12);
    assert!((s2.x_std[1] - stats.x_std[1]).abs() < 1e-12);
    assert_eq!(s2.x_mean[0], stats.x_mean[0]);
    assert_eq!(s2.y_mean, stats.y_mean);
}

#[test]
fn generator_is_deterministic() {
    let cfg = SynthConfig::small();
    assert_eq!(synth_generate(&cfg).unwrap(), synth_generate(&cfg).unwrap());
    let mut other = cfg.clone();
    other.seed += 1;
    assert_ne!(synth_generate(&other).unwrap().x, synth_generate(&cfg).unwrap().x);
}

#[test]
fn mfp_preset_source_fraction_is_calibrated() {
    for seed in 1..=5 {
        let cfg = SynthConfig {
            seed,
            ..SynthConfig::mfp()
        };
        let d = synth_generate(&cfg).unwrap();
        let f = d.domain.source_fraction();
        assert!((0.40..=0.50).contains(&f), "seed {seed}: source fraction {f}");
    }
}

#[test]
fn constant_drive_without_noise_reaches_a_fixed_point() {
    let cfg = SynthConfig::mfp();
    let sys = SynthSystem::new(&cfg);
    let mut r = vec![0.0; cfg.state_dim];
    let mut last = f64::INFINITY;
    for _ in 0..200 {
        let next = sys.transition(&r, [0.4, -0.3]);
        last = next.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        r = next;
    }
    assert!(last < 1e-10, "step change {last}");
}

#[test]
fn setpoint_switches_produce_transients() {
    let d = synth_generate(&SynthConfig::mfp()).unwrap();
    let air = d.label_index("air_flow").unwrap();
    let states: Vec<usize> = (0..d.y.cols()).filter(|c| d.y_names[*c].starts_with("state")).collect();
    let change = |n: usize| {
        states
            .iter()
            .map(|&c| (d.y.get(n + 1, c) - d.y.get(n, c)).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let (mut switches, mut hits) = (0, 0);
    for n in 60..d.len() - 12 {
        let before_constant = (n - 50..n).all(|k| d.y.get(k, air) == d.y.get(n - 50, air));
        if before_constant && d.y.get(n + 1, air) != d.y.get(n, air) {
            let steady = (n - 50..n - 1).map(change).fold(0.0, f64::max);
            let transient = (n..n + 10).map(change).fold(0.0, f64::max);
            switches += 1;
            if transient > steady {
                hits += 1;
            }
        }
    }
    assert!(switches >= 5, "{switches} switches");
    assert!(hits * 10 >= switches * 9, "{hits} of {switches} switches showed a transient");
}

#[test]
fn source_and_target_measurements_differ() {
    let d = synth_generate(&SynthConfig::mfp()).unwrap();
    let mut best = 0.0f64;
    for c in 0..d.x.cols() {
        let (mut s, mut t) = (Vec::new(), Vec::new());
        for r in 0..d.len() {
            if d.domain.is_source(r) {
                s.push(d.x.get(r, c));
            } else {
                t.push(d.x.get(r, c));
            }
        }
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            (m, var, v.len() as f64)
        };
        let (ms, vs, ns) = stats(&s);
        let (mt, vt, nt) = stats(&t);
        let pooled = (((ns - 1.0) * vs + (nt - 1.0) * vt) / (ns + nt - 2.0)).sqrt();
        let se = pooled * (1.0 / ns + 1.0 / nt).sqrt();
        best = best.max((ms - mt).abs() / se);
    }
    assert!(best > 5.0, "largest standardized mean difference {best}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn normalization_inverts(rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 3..20)) {
        let n = rows.len();
        let x = Tensor::from_fn(n, 2, |r, c| rows[r][c] + (r * (c + 1)) as f64);
        let y = Tensor::from_fn(n, 1, |r, _| rows[r][2] - r as f64);
        let d = TimeSeriesDataset::new(x, y, vec!["p".into(), "q".into()], vec!["l".into()]).unwrap();
        if let Ok((norm, stats)) = normalize(&d, &d) {
            let back = stats.invert(&norm).unwrap();
            let scale = 1.0 + d.x.max_abs().max(d.y.max_abs());
            prop_assert!(back.x.max_abs_diff(&d.x) <= 1e-12 * scale);
            prop_assert!(back.y.max_abs_diff(&d.y) <= 1e-12 * scale);
        }
    }
}
