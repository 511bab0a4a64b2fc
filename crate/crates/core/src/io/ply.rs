//! Binary little-endian PLY export/import of Gaussian scenes using the
//! de facto property naming of the 3DGS ecosystem (`x y z`, zero normals,
//! `f_dc_*`, `f_rest_*`, `opacity` as logit, `scale_*` as log, `rot_*` as
//! the raw quaternion), plus a nonstandard trailing `confidence` property
//! that standard viewers ignore.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::gaussian::GaussianSet;
use crate::math::Vec3;

fn property_names(n_coeffs: usize) -> Vec<String> {
    let mut names: Vec<String> =
        ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
            .iter()
            .map(|s| s.to_string())
            .collect();
    for k in 0..3 * (n_coeffs - 1) {
        names.push(format!("f_rest_{k}"));
    }
    names.extend(
        ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
            "confidence"]
        .iter()
        .map(|s| s.to_string()),
    );
    names
}

/// Write a scene as binary little-endian PLY. Requires a non-empty set.
pub fn save_gaussians_ply(set: &GaussianSet, path: &Path) -> Result<()> {
    if set.len() == 0 {
        return Err(Error::EmptyScene);
    }
    set.validate()?;
    let nc = set.n_coeffs();
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", set.len()));
    for name in property_names(nc) {
        header.push_str(&format!("property float {name}\n"));
    }
    header.push_str("end_header\n");

    let mut bytes = Vec::with_capacity(header.len() + set.len() * (17 + 3 * nc) * 4);
    bytes.extend_from_slice(header.as_bytes());
    let mut push = |v: f64| bytes.extend_from_slice(&(v as f32).to_le_bytes());
    for i in 0..set.len() {
        for a in 0..3 {
            push(set.positions[i][a]);
        }
        for _ in 0..3 {
            push(0.0); // normals, unused by splatting but expected by viewers
        }
        let coeffs = set.sh_slice(i);
        for ch in 0..3 {
            push(coeffs[ch * nc]);
        }
        for ch in 0..3 {
            for j in 1..nc {
                push(coeffs[ch * nc + j]);
            }
        }
        push(set.logit_opacity[i]);
        for a in 0..3 {
            push(set.log_scale[i][a]);
        }
        for k in 0..4 {
            push(set.raw_quaternion[i][k]);
        }
        push(set.confidence[i]);
    }
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))
}

/// Read a PLY produced by `save_gaussians_ply` (the trailing `confidence`
/// property is optional and defaults to 0 so external exports load too).
pub fn load_gaussians_ply(path: &Path) -> Result<GaussianSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    let mut read_line = |reader: &mut BufReader<std::fs::File>| -> Result<String> {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::parse(path, "unexpected end of header"));
        }
        Ok(line.trim_end().to_string())
    };

    if read_line(&mut reader)? != "ply" {
        return Err(Error::parse(path, "missing `ply` magic line"));
    }
    if read_line(&mut reader)? != "format binary_little_endian 1.0" {
        return Err(Error::parse(path, "only binary_little_endian 1.0 is supported"));
    }
    let mut n_vertices: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    loop {
        let l = read_line(&mut reader)?;
        if l == "end_header" {
            break;
        }
        if l.starts_with("comment") {
            continue;
        }
        if let Some(rest) = l.strip_prefix("element vertex ") {
            n_vertices = Some(
                rest.parse().map_err(|e| Error::parse(path, format!("vertex count: {e}")))?,
            );
        } else if let Some(rest) = l.strip_prefix("element ") {
            return Err(Error::parse(path, format!("unsupported element `{rest}`")));
        } else if let Some(rest) = l.strip_prefix("property float ") {
            props.push(rest.to_string());
        } else if l.starts_with("property") {
            return Err(Error::parse(path, format!("unsupported property type in `{l}`")));
        }
    }
    let n = n_vertices.ok_or_else(|| Error::parse(path, "missing `element vertex`"))?;

    let n_rest = props.iter().filter(|p| p.starts_with("f_rest_")).count();
    if n_rest % 3 != 0 {
        return Err(Error::parse(path, format!("{n_rest} f_rest properties not divisible by 3")));
    }
    let nc = 1 + n_rest / 3;
    let degree = match nc {
        1 => 0,
        4 => 1,
        9 => 2,
        16 => 3,
        other => {
            return Err(Error::parse(path, format!("{other} SH coefficients per channel")))
        }
    };
    let has_confidence = props.iter().any(|p| p == "confidence");
    let mut expected = property_names(nc);
    if !has_confidence {
        expected.pop();
    }
    if props != expected {
        return Err(Error::parse(
            path,
            format!("unexpected property layout: got {props:?}"),
        ));
    }

    let stride = props.len();
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    if payload.len() != n * stride * 4 {
        return Err(Error::parse(
            path,
            format!("payload {} bytes, expected {}", payload.len(), n * stride * 4),
        ));
    }

    let mut set = GaussianSet::empty(degree)?;
    let at = |i: usize, k: usize| {
        let o = (i * stride + k) * 4;
        f32::from_le_bytes([payload[o], payload[o + 1], payload[o + 2], payload[o + 3]]) as f64
    };
    for i in 0..n {
        set.positions.push(Vec3::new(at(i, 0), at(i, 1), at(i, 2)));
        // fields 3..6 are normals, ignored
        let mut coeffs = vec![0.0; 3 * nc];
        for ch in 0..3 {
            coeffs[ch * nc] = at(i, 6 + ch);
        }
        for ch in 0..3 {
            for j in 1..nc {
                coeffs[ch * nc + j] = at(i, 9 + ch * (nc - 1) + (j - 1));
            }
        }
        set.sh.extend_from_slice(&coeffs);
        let base = 9 + 3 * (nc - 1);
        set.logit_opacity.push(at(i, base));
        set.log_scale.push(Vec3::new(at(i, base + 1), at(i, base + 2), at(i, base + 3)));
        set.raw_quaternion.push([
            at(i, base + 4),
            at(i, base + 5),
            at(i, base + 6),
            at(i, base + 7),
        ]);
        set.confidence.push(if has_confidence { at(i, base + 8) } else { 0.0 });
    }
    set.validate()?;
    Ok(set)
}
