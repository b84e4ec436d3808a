//! On-disk layout of a wavelet decomposition: one 16-bit PNG per sub-band
//! plus `pyramid.txt` describing how to undo the display mapping.
//!
//! Level `k` (1 = finest) coefficients lie in `[0, 2^k]` for LL and
//! `[-2^(k-1), 2^(k-1)]` for details, so LL is stored as `v / 2^k` and details
//! as `0.5 + v / 2^k`.

use std::fmt::Write as _;
use std::path::Path;

use edibnet::io::{load_image, save_image16};
use edibnet::wavelet::{Details, WaveletBasis, WaveletPyramid};
use edibnet::{Error, Result, Tensor};

pub struct Layout {
    pub basis: WaveletBasis,
    pub levels: usize,
    pub height: usize,
    pub width: usize,
}

impl Layout {
    fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "wavelet = {}", self.basis.name());
        let _ = writeln!(s, "levels = {}", self.levels);
        let _ = writeln!(s, "height = {}", self.height);
        let _ = writeln!(s, "width = {}", self.width);
        s
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut basis = None;
        let (mut levels, mut height, mut width) = (None, None, None);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format { path: path.into(), msg: format!("expected key = value, got '{line}'") })?;
            let v = v.trim();
            let num = || {
                v.parse::<usize>()
                    .map_err(|_| Error::Format { path: path.into(), msg: format!("bad number '{v}' for {}", k.trim()) })
            };
            match k.trim() {
                "wavelet" => basis = Some(v.parse()?),
                "levels" => levels = Some(num()?),
                "height" => height = Some(num()?),
                "width" => width = Some(num()?),
                other => return Err(Error::Format { path: path.into(), msg: format!("unknown key '{other}'") }),
            }
        }
        let missing = |k: &str| Error::Format { path: path.into(), msg: format!("missing key '{k}'") };
        Ok(Layout {
            basis: basis.ok_or_else(|| missing("wavelet"))?,
            levels: levels.ok_or_else(|| missing("levels"))?,
            height: height.ok_or_else(|| missing("height"))?,
            width: width.ok_or_else(|| missing("width"))?,
        })
    }
}

fn band_path(dir: &Path, band: &str, level: usize) -> std::path::PathBuf {
    dir.join(format!("{band}{level}.png"))
}

pub fn write(dir: &Path, p: &WaveletPyramid, layout: &Layout) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    for (i, d) in p.details.iter().enumerate() {
        let k = i + 1;
        let s = 1.0 / (1u32 << k) as f32;
        for (name, t) in [("lh", &d.lh), ("hl", &d.hl), ("hh", &d.hh)] {
            save_image16(&t.map(|v| 0.5 + v * s), &band_path(dir, name, k))?;
        }
    }
    let s = 1.0 / (1u32 << p.levels()) as f32;
    save_image16(&p.top_ll.map(|v| v * s), &band_path(dir, "ll", p.levels()))?;
    let meta = dir.join("pyramid.txt");
    std::fs::write(&meta, layout.to_text()).map_err(|e| Error::Io { path: meta, source: e })
}

pub fn read(dir: &Path) -> Result<(WaveletPyramid, Layout)> {
    let meta = dir.join("pyramid.txt");
    let text = std::fs::read_to_string(&meta).map_err(|e| Error::Io { path: meta.clone(), source: e })?;
    let layout = Layout::parse(&text, &meta)?;
    let mut details = Vec::with_capacity(layout.levels);
    for k in 1..=layout.levels {
        let s = (1u32 << k) as f32;
        let band = |name: &str| -> Result<Tensor> { Ok(load_image(&band_path(dir, name, k))?.map(|v| (v - 0.5) * s)) };
        details.push(Details { lh: band("lh")?, hl: band("hl")?, hh: band("hh")? });
    }
    let s = (1u32 << layout.levels) as f32;
    let top_ll = load_image(&band_path(dir, "ll", layout.levels))?.map(|v| v * s);
    Ok((WaveletPyramid { top_ll, details }, layout))
}
