//! Segmentation metrics (DSC, ASSD), per-run reports and ablation tables.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::SegMask;
use crate::error::{Error, Result};
use crate::plot;

/// Dice similarity coefficient in percent; two empty masks score 100.
pub fn dsc(pred: &SegMask, gt: &SegMask) -> Result<f64> {
    if !pred.same_shape(gt.height(), gt.width()) {
        return Err(Error::ShapeMismatch("dsc operands differ".into()));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.pixels().iter().zip(gt.pixels()) {
        inter += (p & g) as usize;
        a += p as usize;
        b += g as usize;
    }
    if a + b == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * inter as f64 / (a + b) as f64)
}

/// Foreground pixels with at least one background 4-neighbour; pixels outside
/// the image count as background.
pub fn surface(mask: &SegMask) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !mask.get(y - 1, x)
                || !mask.get(y + 1, x)
                || !mask.get(y, x - 1)
                || !mask.get(y, x + 1);
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// 1-D squared distance transform of a sampled function (lower envelope of
/// parabolas). Infinite samples carry no seed.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let mut seeds = f.iter().enumerate().filter(|(_, x)| x.is_finite()).map(|(i, _)| i);
    let Some(first) = seeds.next() else {
        out.fill(f64::INFINITY);
        return;
    };
    let mut k = 0usize;
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in seeds {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest seed.
fn squared_distance_field(h: usize, w: usize, seeds: &[(usize, usize)]) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; h * w];
    for &(y, x) in seeds {
        grid[y * w + x] = 0.0;
    }
    let n = h.max(w);
    let (mut f, mut out, mut v, mut z) = (vec![0.0; n], vec![0.0; n], vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Average symmetric surface distance in pixels.
pub fn assd(pred: &SegMask, gt: &SegMask) -> Result<f64> {
    if !pred.same_shape(gt.height(), gt.width()) {
        return Err(Error::ShapeMismatch("assd operands differ".into()));
    }
    if pred.is_empty() {
        return Err(Error::UndefinedSurfaceDistance("prediction is empty"));
    }
    if gt.is_empty() {
        return Err(Error::UndefinedSurfaceDistance("ground truth is empty"));
    }
    let (h, w) = (gt.height(), gt.width());
    let sa = surface(pred);
    let sb = surface(gt);
    let da = squared_distance_field(h, w, &sa);
    let db = squared_distance_field(h, w, &sb);
    let ab: f64 = sa.iter().map(|&(y, x)| db[y * w + x].sqrt()).sum();
    let ba: f64 = sb.iter().map(|&(y, x)| da[y * w + x].sqrt()).sum();
    // Two directed sums added once, so swapping the operands is bit-exact.
    Ok((ab + ba) / (sa.len() + sb.len()) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemMetric {
    pub item: String,
    pub dsc: f64,
    /// `None` when either mask is empty; the item is then flagged.
    pub assd: Option<f64>,
    pub flags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub seed: u64,
    pub epoch: u64,
    pub config_hash: String,
    pub checkpoint_hash: Option<String>,
    pub items: Vec<ItemMetric>,
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub assd_mean: f64,
    pub assd_std: f64,
    pub assd_excluded: usize,
    pub std_denominator: String,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricReport {
    /// Scores predicted masks against ground truth, item by item.
    pub fn evaluate(label: &str, ids: &[String], preds: &[SegMask], gts: &[SegMask]) -> Result<Self> {
        if ids.len() != preds.len() || preds.len() != gts.len() {
            return Err(Error::ShapeMismatch("report inputs have different lengths".into()));
        }
        let mut items = Vec::with_capacity(preds.len());
        for ((id, p), g) in ids.iter().zip(preds).zip(gts) {
            let d = dsc(p, g)?;
            let mut flags = Vec::new();
            let a = match assd(p, g) {
                Ok(v) => Some(v),
                Err(Error::UndefinedSurfaceDistance(why)) => {
                    flags.push(format!("assd-undefined:{}", why.replace(' ', "-")));
                    None
                }
                Err(e) => return Err(e),
            };
            items.push(ItemMetric {
                item: id.clone(),
                dsc: d,
                assd: a,
                flags,
            });
        }
        Ok(Self::from_items(label, items))
    }

    pub fn from_items(label: &str, items: Vec<ItemMetric>) -> Self {
        let dscs: Vec<f64> = items.iter().map(|i| i.dsc).collect();
        let assds: Vec<f64> = items.iter().filter_map(|i| i.assd).collect();
        let (dsc_mean, dsc_std) = mean_std(&dscs);
        let (assd_mean, assd_std) = mean_std(&assds);
        MetricReport {
            label: label.to_string(),
            seed: 0,
            epoch: 0,
            config_hash: String::new(),
            checkpoint_hash: None,
            assd_excluded: items.len() - assds.len(),
            items,
            dsc_mean,
            dsc_std,
            assd_mean,
            assd_std,
            std_denominator: "population (n)".into(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("item,dsc,assd,flags\n");
        for i in &self.items {
            let assd = i.assd.map(|v| format!("{v:.6}")).unwrap_or_default();
            out.push_str(&format!("{},{:.6},{},{}\n", i.item, i.dsc, assd, i.flags.join(";")));
        }
        out
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("{stem}.json"));
        let body = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(&json, body).map_err(|e| Error::io(&json, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationMode {
    #[serde(rename = "no-DA")]
    NoDa,
    #[serde(rename = "GAA-only")]
    GaaOnly,
    #[serde(rename = "GBL-only")]
    GblOnly,
    #[serde(rename = "full")]
    Full,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [AblationMode::NoDa, AblationMode::GaaOnly, AblationMode::GblOnly, AblationMode::Full];

    pub fn as_str(&self) -> &'static str {
        match self {
            AblationMode::NoDa => "no-DA",
            AblationMode::GaaOnly => "GAA-only",
            AblationMode::GblOnly => "GBL-only",
            AblationMode::Full => "full",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown ablation mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub runs: usize,
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub assd_mean: f64,
    pub delta_vs_no_da: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, mode: AblationMode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,runs,dsc_mean,dsc_std,assd_mean,delta_vs_no_da\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.4},{:.4},{:.4},{:+.4}\n",
                r.mode, r.runs, r.dsc_mean, r.dsc_std, r.assd_mean, r.delta_vs_no_da
            ));
        }
        out
    }

    pub fn to_svg(&self) -> String {
        let labels: Vec<String> = self.rows.iter().map(|r| r.mode.to_string()).collect();
        let means: Vec<f64> = self.rows.iter().map(|r| r.dsc_mean).collect();
        let stds: Vec<f64> = self.rows.iter().map(|r| r.dsc_std).collect();
        plot::bar_chart("Ablation: target DSC", "DSC (%)", &labels, &means, &stds)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("ablation.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let svg = dir.join("ablation.svg");
        fs::write(&svg, self.to_svg()).map_err(|e| Error::io(&svg, e))
    }
}

/// Aggregates labelled run reports into one row per mode, in fixed mode order.
/// Each row's mean/std is over the per-run mean DSC values.
pub fn tabulate_ablation(runs: &[(AblationMode, MetricReport)]) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for mode in AblationMode::ALL {
        let dscs: Vec<f64> = runs.iter().filter(|(m, _)| *m == mode).map(|(_, r)| r.dsc_mean).collect();
        if dscs.is_empty() {
            return Err(Error::IncompleteAblationSet(mode.to_string()));
        }
        let assds: Vec<f64> = runs
            .iter()
            .filter(|(m, r)| *m == mode && r.assd_mean.is_finite())
            .map(|(_, r)| r.assd_mean)
            .collect();
        let (dsc_mean, dsc_std) = mean_std(&dscs);
        rows.push(AblationRow {
            mode,
            runs: dscs.len(),
            dsc_mean,
            dsc_std,
            assd_mean: mean_std(&assds).0,
            delta_vs_no_da: 0.0,
        });
    }
    let base = rows[0].dsc_mean;
    for r in &mut rows {
        r.delta_vs_no_da = r.dsc_mean - base;
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> SegMask {
        SegMask::from_fn(h, w, |y, x| on.contains(&(y, x)))
    }

    #[test]
    fn dsc_cases() {
        let a = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let b = mask(4, 4, &[(0, 0), (0, 1), (2, 2), (3, 3)]);
        let c = mask(4, 4, &[(3, 0)]);
        assert_eq!(dsc(&a, &a).unwrap(), 100.0);
        assert_eq!(dsc(&a, &c).unwrap(), 0.0);
        assert_eq!(dsc(&a, &b).unwrap(), 50.0);
        assert_eq!(dsc(&SegMask::zeros(4, 4), &SegMask::zeros(4, 4)).unwrap(), 100.0);
    }

    #[test]
    fn assd_cases() {
        let a = mask(8, 8, &[(4, 1)]);
        let b = mask(8, 8, &[(4, 4)]);
        assert_eq!(assd(&a, &b).unwrap(), 3.0);
        assert_eq!(assd(&a, &a).unwrap(), 0.0);
        assert!(matches!(assd(&a, &SegMask::zeros(8, 8)), Err(Error::UndefinedSurfaceDistance(_))));
    }

    #[test]
    fn report_flags_empty_predictions() {
        let gt = mask(8, 8, &[(2, 2), (2, 3)]);
        let r = MetricReport::evaluate("x", &["a".into(), "b".into()], &[gt.clone(), SegMask::zeros(8, 8)], &[gt.clone(), gt]).unwrap();
        assert_eq!(r.assd_excluded, 1);
        assert_eq!(r.dsc_mean, 50.0);
        assert_eq!(r.dsc_std, 50.0);
        assert!(r.to_csv().contains("b,0.000000,,assd-undefined"));
    }

    #[test]
    fn ablation_table_deltas_and_order() {
        let mk = |m: AblationMode, v: f64| {
            let mut r = MetricReport::from_items(m.as_str(), vec![]);
            r.dsc_mean = v;
            (m, r)
        };
        let runs = vec![
            mk(AblationMode::Full, 76.0),
            mk(AblationMode::NoDa, 70.0),
            mk(AblationMode::GblOnly, 73.0),
            mk(AblationMode::GaaOnly, 72.0),
        ];
        let t = tabulate_ablation(&runs).unwrap();
        let order: Vec<_> = t.rows.iter().map(|r| r.mode).collect();
        assert_eq!(order, AblationMode::ALL.to_vec());
        let deltas: Vec<f64> = t.rows.iter().map(|r| r.delta_vs_no_da).collect();
        assert_eq!(deltas, vec![0.0, 2.0, 3.0, 6.0]);
        assert!(t.rows.iter().all(|r| r.dsc_std == 0.0));
        assert!(matches!(tabulate_ablation(&runs[..3]), Err(Error::IncompleteAblationSet(_))));
    }
}
