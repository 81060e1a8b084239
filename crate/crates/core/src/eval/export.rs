//! Plot-ready series files: one CSV per curve, written in a fixed order so that
//! re-exporting leaves untouched curves byte-identical.
//!
//! * `fig1`: coupled noise curves per setup, `fig1/setup<k>/<model>.csv`.
//! * `fig2`: setup 3 curves per kernel, `fig2/<kernel>/<model>.csv`.
//! * `fig4`: image curves and their difference to `np`, `fig4/{curves,delta-vs-np}/<model>.csv`.
//! * `fig6`: the decoupled `s x r` grid, `fig6/setup<k>/<model>.csv`.
//! * `fig7`: ablation curves and tuned weights, `fig7/ablations/<model>.csv`, `fig7/weights.csv`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::experiment::select_weight;
use super::results::{aggregate, Aggregate, ResultRow};
use crate::error::{Error, Result};
use crate::funcdata::Setup;

pub const FIGURES: [&str; 5] = ["fig1", "fig2", "fig4", "fig6", "fig7"];

fn fmt_std(s: Option<f64>) -> String {
    s.map(|v| v.to_string()).unwrap_or_default()
}

fn safe(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn write_file(path: &Path, body: &str) -> Result<PathBuf> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    // leave unchanged files alone so their timestamps survive re-exports
    if fs::read_to_string(path).ok().as_deref() != Some(body) {
        fs::write(path, body)?;
    }
    Ok(path.to_path_buf())
}

fn curve(points: &[&Aggregate]) -> String {
    let mut s = String::from("noise,mean,std,seeds\n");
    for a in points {
        s.push_str(&format!(
            "{},{},{},{}\n",
            a.noise_s,
            a.mean,
            fmt_std(a.std),
            a.seeds
        ));
    }
    s
}

fn is_tuning(a: &Aggregate) -> bool {
    a.dataset.ends_with("-val") || a.model.contains("[w=")
}

fn coupled(a: &Aggregate) -> bool {
    a.noise_s == a.noise_r
}

/// Curves keyed by `(group, model)`, points ordered by noise.
fn curves<'a>(
    aggs: &'a [Aggregate],
    keep: impl Fn(&Aggregate) -> Option<String>,
) -> BTreeMap<(String, String), Vec<&'a Aggregate>> {
    let mut out: BTreeMap<(String, String), Vec<&Aggregate>> = BTreeMap::new();
    for a in aggs.iter().filter(|a| !is_tuning(a) && coupled(a)) {
        if let Some(group) = keep(a) {
            out.entry((group, a.model.clone())).or_default().push(a);
        }
    }
    for v in out.values_mut() {
        v.sort_by(|x, y| x.noise_s.total_cmp(&y.noise_s));
    }
    out
}

fn write_curves(
    out: &Path,
    fig: &str,
    c: &BTreeMap<(String, String), Vec<&Aggregate>>,
) -> Result<Vec<PathBuf>> {
    c.iter()
        .map(|((group, model), pts)| {
            write_file(
                &out.join(fig)
                    .join(safe(group))
                    .join(format!("{}.csv", safe(model))),
                &curve(pts),
            )
        })
        .collect()
}

/// Writes the series files of one figure and returns their paths.
pub fn export_figure(rows: &[ResultRow], figure: &str, out: &Path) -> Result<Vec<PathBuf>> {
    let aggs = aggregate(rows);
    let image = |a: &Aggregate| a.kernel == "image";
    match figure {
        "fig1" => {
            let c = curves(&aggs, |a| (!image(a)).then(|| format!("setup{}", a.setup)));
            write_curves(out, figure, &c)
        }
        "fig2" => {
            let c = curves(&aggs, |a| {
                (!image(a) && a.setup == Setup::Three).then(|| a.kernel.clone())
            });
            write_curves(out, figure, &c)
        }
        "fig4" => {
            let c = curves(&aggs, |a| image(a).then(|| "curves".to_string()));
            let mut files = write_curves(out, figure, &c)?;
            let np: BTreeMap<u64, f64> = c
                .iter()
                .filter(|((_, m), _)| m == "np")
                .flat_map(|(_, pts)| pts.iter().map(|a| (a.noise_s.to_bits(), a.mean)))
                .collect();
            for ((_, model), pts) in &c {
                let mut s = String::from("noise,delta\n");
                for a in pts {
                    if let Some(base) = np.get(&a.noise_s.to_bits()) {
                        s.push_str(&format!("{},{}\n", a.noise_s, a.mean - base));
                    }
                }
                files.push(write_file(
                    &out.join(figure)
                        .join("delta-vs-np")
                        .join(format!("{}.csv", safe(model))),
                    &s,
                )?);
            }
            Ok(files)
        }
        "fig6" => {
            let mut grid: BTreeMap<(String, String), Vec<&Aggregate>> = BTreeMap::new();
            for a in aggs.iter().filter(|a| !is_tuning(a) && !image(a)) {
                grid.entry((format!("setup{}", a.setup), a.model.clone()))
                    .or_default()
                    .push(a);
            }
            // only curves that actually vary the two axes separately
            grid.retain(|_, v| v.iter().any(|a| !coupled(a)));
            let mut files = Vec::new();
            for ((group, model), mut pts) in grid {
                pts.sort_by(|x, y| {
                    x.noise_s
                        .total_cmp(&y.noise_s)
                        .then(x.noise_r.total_cmp(&y.noise_r))
                });
                let mut s = String::from("noise_s,noise_r,mean,std,seeds\n");
                for a in pts {
                    s.push_str(&format!(
                        "{},{},{},{},{}\n",
                        a.noise_s,
                        a.noise_r,
                        a.mean,
                        fmt_std(a.std),
                        a.seeds
                    ));
                }
                files.push(write_file(
                    &out.join(figure)
                        .join(group)
                        .join(format!("{}.csv", safe(&model))),
                    &s,
                )?);
            }
            Ok(files)
        }
        "fig7" => {
            let ablation = |m: &str| m.ends_with("-no-sig") || m.ends_with("-all-pts");
            let bases: Vec<String> = aggs
                .iter()
                .filter(|a| ablation(&a.model))
                .map(|a| a.model.rsplitn(3, '-').last().unwrap_or("").to_string())
                .collect();
            let c = curves(&aggs, |a| {
                (a.setup == Setup::Three && (ablation(&a.model) || bases.contains(&a.model)))
                    .then(|| "ablations".to_string())
            });
            let mut files = write_curves(out, figure, &c)?;
            let mut tables: BTreeMap<(String, u64), Vec<(f64, f64)>> = BTreeMap::new();
            for a in aggs.iter().filter(|a| a.dataset.ends_with("-val")) {
                if let Some((base, w)) = a.model.strip_suffix(']').and_then(|m| m.split_once("[w="))
                {
                    if let Ok(w) = w.parse::<f64>() {
                        tables
                            .entry((base.to_string(), a.noise_s.to_bits()))
                            .or_default()
                            .push((w, a.mean));
                    }
                }
            }
            if !tables.is_empty() {
                let mut s = String::from("model,noise,best_w,candidates\n");
                for ((model, noise), t) in &tables {
                    let best = select_weight(t)?;
                    s.push_str(&format!(
                        "{model},{},{best},{}\n",
                        f64::from_bits(*noise),
                        t.len()
                    ));
                }
                files.push(write_file(&out.join(figure).join("weights.csv"), &s)?);
            }
            Ok(files)
        }
        other => Err(Error::Config(format!(
            "unknown figure `{other}`; expected one of {}",
            FIGURES.join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(model: &str, kernel: &str, setup: Setup, s: f64, seed: u64, ll: f64) -> ResultRow {
        ResultRow {
            dataset: "gp".into(),
            kernel: kernel.into(),
            model: model.into(),
            setup,
            noise_s: s,
            noise_r: s,
            seed,
            target_ll: ll,
            n_tasks: 1,
            k_eval: 1,
        }
    }

    #[test]
    fn single_row_gives_single_point_series() {
        let dir = tempfile::tempdir().unwrap();
        let files = export_figure(
            &[row("np", "rbf", Setup::One, 0.3, 0, -0.5)],
            "fig1",
            dir.path(),
        )
        .unwrap();
        assert_eq!(files.len(), 1);
        let text = fs::read_to_string(&files[0]).unwrap();
        assert_eq!(text, "noise,mean,std,seeds\n0.3,-0.5,,1\n");
    }

    #[test]
    fn np_delta_against_itself_is_zero() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<_> = [0.0, 0.3, 0.6]
            .iter()
            .flat_map(|&s| {
                [
                    row("np", "image", Setup::Three, s, 0, -0.4 - s),
                    row("r-banp", "image", Setup::Three, s, 0, 0.1 - s * s),
                ]
            })
            .collect();
        export_figure(&rows, "fig4", dir.path()).unwrap();
        let np = fs::read_to_string(dir.path().join("fig4/delta-vs-np/np.csv")).unwrap();
        for line in np.lines().skip(1) {
            assert_eq!(line.split(',').nth(1).unwrap(), "0");
        }
        let r = fs::read_to_string(dir.path().join("fig4/delta-vs-np/r-banp.csv")).unwrap();
        assert_eq!(r.lines().count(), 4);
    }

    #[test]
    fn re_export_keeps_untouched_series_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut rows = vec![
            row("np", "rbf", Setup::Three, 0.0, 0, -0.1),
            row("anp", "rbf", Setup::Three, 0.0, 0, 0.2),
        ];
        export_figure(&rows, "fig2", dir.path()).unwrap();
        let np_before = fs::read(dir.path().join("fig2/rbf/np.csv")).unwrap();
        let anp_before = fs::read(dir.path().join("fig2/rbf/anp.csv")).unwrap();
        rows.push(row("anp", "rbf", Setup::Three, 0.3, 0, -0.3));
        export_figure(&rows, "fig2", dir.path()).unwrap();
        assert_eq!(
            fs::read(dir.path().join("fig2/rbf/np.csv")).unwrap(),
            np_before
        );
        assert_ne!(
            fs::read(dir.path().join("fig2/rbf/anp.csv")).unwrap(),
            anp_before
        );
    }

    #[test]
    fn weights_table_follows_validation_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut rows = Vec::new();
        for (w, ll) in [(0.0, -1.0), (5.0, -0.8), (10.0, -0.9)] {
            let mut r = row(&format!("r-anp[w={w}]"), "rbf", Setup::Three, 0.6, 0, ll);
            r.dataset = "gp-val".into();
            rows.push(r);
        }
        rows.push(row("r-anp", "rbf", Setup::Three, 0.6, 0, -0.7));
        rows.push(row("r-anp-no-sig", "rbf", Setup::Three, 0.6, 0, -0.9));
        export_figure(&rows, "fig7", dir.path()).unwrap();
        let w = fs::read_to_string(dir.path().join("fig7/weights.csv")).unwrap();
        assert_eq!(w.lines().nth(1).unwrap(), "r-anp,0.6,5,3");
        assert!(dir.path().join("fig7/ablations/r-anp.csv").exists());
        assert!(dir.path().join("fig7/ablations/r-anp-no-sig.csv").exists());
    }

    #[test]
    fn unknown_figure_is_an_error() {
        assert!(export_figure(&[], "fig9", Path::new("/nonexistent")).is_err());
    }
}
