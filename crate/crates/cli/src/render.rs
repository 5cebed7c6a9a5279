use anyhow::{bail, Result};
use neurolrp::explain::Heatmap;
use neurolrp::volume::linear_index;
use neurolrp::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceSpec {
    pub axis: usize,
    pub index: usize,
}

impl std::str::FromStr for SliceSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (axis, index) = s.split_once(':').ok_or_else(|| anyhow::anyhow!("slice must look like z:16, got {s:?}"))?;
        let axis = match axis {
            "x" => 0,
            "y" => 1,
            "z" => 2,
            _ => bail!("slice axis must be x, y or z, got {axis:?}"),
        };
        Ok(SliceSpec {
            axis,
            index: index.parse()?,
        })
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 255.0) + 0.5).floor().min(255.0) as u8
}

/// Binary PPM of one slice: the volume as grey underlay, relevance clamped
/// to `[-range, range]` blended in red (positive) or blue (negative).
/// Rows run from high to low on the slice's vertical axis.
pub fn render_slice(volume: &Volume, heatmap: Option<&Heatmap>, slice: SliceSpec, range: f64) -> Result<Vec<u8>> {
    let dims = volume.dims();
    if let Some(h) = heatmap {
        if h.dims() != dims {
            bail!("heatmap dims {:?} differ from volume dims {:?}", h.dims(), dims);
        }
    }
    if slice.index >= dims[slice.axis] {
        bail!("slice index {} out of bounds for axis of length {}", slice.index, dims[slice.axis]);
    }
    if !(range > 0.0) {
        bail!("render range must be positive");
    }
    let (u, v) = match slice.axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (w, h) = (dims[u], dims[v]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for row in 0..h {
        for col in 0..w {
            let mut p = [0usize; 3];
            p[slice.axis] = slice.index;
            p[u] = col;
            p[v] = h - 1 - row;
            let i = linear_index(dims, p[0], p[1], p[2]);
            let grey = volume.data()[i].clamp(0.0, 1.0) as f64 * 255.0;
            let r = heatmap.map_or(0.0, |hm| (hm.data()[i] as f64 / range).clamp(-1.0, 1.0));
            let a = r.abs();
            let base = grey * (1.0 - a);
            let (red, blue) = if r > 0.0 { (base + 255.0 * a, base) } else { (base, base + 255.0 * a) };
            out.extend_from_slice(&[to_byte(red), to_byte(base), to_byte(blue)]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol() -> Volume {
        Volume::from_fn([4, 3, 2], |x, y, z| (x + y + z) as f32 / 7.0).unwrap()
    }

    fn pixels(ppm: &[u8]) -> &[u8] {
        let mut newlines = 0;
        let start = ppm.iter().position(|&b| {
            newlines += (b == b'\n') as usize;
            newlines == 3
        });
        &ppm[start.unwrap() + 1..]
    }

    #[test]
    fn zero_heatmap_is_grey() {
        let v = vol();
        let zero = Heatmap::new([4, 3, 2], vec![0.0; 24]).unwrap();
        let ppm = render_slice(&v, Some(&zero), "z:1".parse().unwrap(), 0.03).unwrap();
        assert!(ppm.starts_with(b"P6\n4 3\n255\n"));
        assert_eq!(ppm, render_slice(&v, None, "z:1".parse().unwrap(), 0.03).unwrap());
        assert!(pixels(&ppm).chunks(3).all(|p| p[0] == p[1] && p[1] == p[2]));
    }

    #[test]
    fn symmetric_relevance_gives_mirrored_colours() {
        let v = Volume::filled([2, 1, 1], 0.5);
        let h = Heatmap::new([2, 1, 1], vec![0.01, -0.01]).unwrap();
        let ppm = render_slice(&v, Some(&h), "z:0".parse().unwrap(), 0.03).unwrap();
        let px = pixels(&ppm);
        assert_eq!(px.len(), 6);
        assert_eq!([px[0], px[1], px[2]], [px[5], px[4], px[3]]);
        assert!(px[0] > px[2]);
    }

    #[test]
    fn bad_slices() {
        let v = vol();
        assert!(render_slice(&v, None, "z:2".parse().unwrap(), 0.03).is_err());
        assert!("w:1".parse::<SliceSpec>().is_err());
        assert!("z".parse::<SliceSpec>().is_err());
        assert_eq!("x:3".parse::<SliceSpec>().unwrap(), SliceSpec { axis: 0, index: 3 });
    }
}
