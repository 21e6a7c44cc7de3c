//! OBJ and OFF readers (fan-triangulating polygons) and a minimal OBJ writer.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{GeometryError, Mesh};

/// Load a triangle mesh from an OBJ or OFF file, deciding by extension
/// (falling back to content sniffing). Polygons are fan-triangulated.
/// Non-manifold input is accepted; the voxelizer copes with it.
pub fn load_mesh(path: &Path) -> Result<Mesh, GeometryError> {
    let text = fs::read_to_string(path)?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    let mesh = match ext.as_deref() {
        Some("obj") => parse_obj(&text)?,
        Some("off") => parse_off(&text)?,
        _ => {
            if text.trim_start().starts_with("OFF") {
                parse_off(&text)?
            } else {
                parse_obj(&text)?
            }
        }
    };
    mesh.validate()?;
    if mesh.is_empty() {
        return Err(GeometryError::Parse {
            line: 0,
            msg: "no vertices or faces found".into(),
        });
    }
    Ok(mesh)
}

fn parse_obj(text: &str) -> Result<Mesh, GeometryError> {
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let mut it = l.split_whitespace();
        match it.next() {
            Some("v") => {
                let mut v = [0.0f64; 3];
                for c in v.iter_mut() {
                    let tok = it.next().ok_or(GeometryError::Parse {
                        line,
                        msg: "vertex needs 3 coordinates".into(),
                    })?;
                    *c = tok.parse().map_err(|_| GeometryError::Parse {
                        line,
                        msg: format!("bad coordinate '{tok}'"),
                    })?;
                }
                vertices.push(v);
            }
            Some("f") => {
                let mut idx: Vec<usize> = Vec::new();
                for tok in it {
                    // "i", "i/t", "i/t/n", "i//n" all start with the vertex index
                    let head = tok.split('/').next().unwrap_or("");
                    let i: i64 = head.parse().map_err(|_| GeometryError::Parse {
                        line,
                        msg: format!("bad face index '{tok}'"),
                    })?;
                    let resolved = if i > 0 {
                        (i - 1) as usize
                    } else if i < 0 {
                        // negative indices count from the end
                        let n = vertices.len() as i64;
                        let j = n + i;
                        if j < 0 {
                            return Err(GeometryError::Parse {
                                line,
                                msg: format!("negative index {i} out of range"),
                            });
                        }
                        j as usize
                    } else {
                        return Err(GeometryError::Parse {
                            line,
                            msg: "face index 0 is invalid (OBJ is 1-based)".into(),
                        });
                    };
                    if resolved >= vertices.len() {
                        return Err(GeometryError::Parse {
                            line,
                            msg: format!("face index {i} out of range"),
                        });
                    }
                    idx.push(resolved);
                }
                if idx.len() < 3 {
                    return Err(GeometryError::Parse {
                        line,
                        msg: "face needs at least 3 indices".into(),
                    });
                }
                for t in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[t], idx[t + 1]]);
                }
            }
            // ignore normals, texcoords, groups, materials
            _ => {}
        }
    }
    Ok(Mesh { vertices, faces })
}

fn parse_off(text: &str) -> Result<Mesh, GeometryError> {
    // Tokenize with line tracking so errors can name the line.
    let mut tokens: Vec<(usize, &str)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let l = raw.split('#').next().unwrap_or("");
        for tok in l.split_whitespace() {
            tokens.push((lineno + 1, tok));
        }
    }
    let mut pos = 0usize;
    let mut next = |what: &str| -> Result<(usize, &str), GeometryError> {
        let t = tokens.get(pos).copied().ok_or_else(|| GeometryError::Parse {
            line: tokens.last().map(|t| t.0).unwrap_or(0),
            msg: format!("unexpected end of file, expected {what}"),
        })?;
        pos += 1;
        Ok(t)
    };

    let (line, magic) = next("OFF header")?;
    if magic != "OFF" {
        return Err(GeometryError::Parse {
            line,
            msg: format!("expected OFF header, found '{magic}'"),
        });
    }
    let parse_count = |(line, tok): (usize, &str), what: &str| -> Result<usize, GeometryError> {
        tok.parse().map_err(|_| GeometryError::Parse {
            line,
            msg: format!("bad {what} '{tok}'"),
        })
    };
    let nv = parse_count(next("vertex count")?, "vertex count")?;
    let nf = parse_count(next("face count")?, "face count")?;
    let _ne = parse_count(next("edge count")?, "edge count")?;

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let mut v = [0.0f64; 3];
        for c in v.iter_mut() {
            let (line, tok) = next("vertex coordinate")?;
            *c = tok.parse().map_err(|_| GeometryError::Parse {
                line,
                msg: format!("bad coordinate '{tok}'"),
            })?;
        }
        vertices.push(v);
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let k = parse_count(next("polygon size")?, "polygon size")?;
        if k < 3 {
            let line = tokens.get(pos.saturating_sub(1)).map(|t| t.0).unwrap_or(0);
            return Err(GeometryError::Parse {
                line,
                msg: format!("polygon with {k} vertices"),
            });
        }
        let mut idx = Vec::with_capacity(k);
        for _ in 0..k {
            let (line, tok) = next("face index")?;
            let i: usize = tok.parse().map_err(|_| GeometryError::Parse {
                line,
                msg: format!("bad face index '{tok}'"),
            })?;
            if i >= nv {
                return Err(GeometryError::Parse {
                    line,
                    msg: format!("face index {i} out of range"),
                });
            }
            idx.push(i);
        }
        for t in 1..k - 1 {
            faces.push([idx[0], idx[t], idx[t + 1]]);
        }
    }
    Ok(Mesh { vertices, faces })
}

/// Write a mesh as OBJ (v/f records, 1-based indices).
pub fn write_obj(mesh: &Mesh, path: &Path) -> Result<(), GeometryError> {
    let mut out = String::with_capacity(mesh.vertices.len() * 32);
    for v in &mesh.vertices {
        out.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
    }
    for f in &mesh.faces {
        out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    let mut file = fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(name: &str, content: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("shapecorr_meshio_tests");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join(name);
        std::fs::write(&p, content).unwrap();
        p
    }

    #[test]
    fn single_triangle_obj() {
        let p = write_tmp(
            "tri.obj",
            "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n",
        );
        let m = load_mesh(&p).unwrap();
        assert_eq!(m.vertices.len(), 3);
        assert_eq!(m.faces.len(), 1);
    }

    #[test]
    fn quad_faces_fan_triangulated() {
        // cube as 6 quads -> 12 triangles
        let content = "\
v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nv 0 0 1\nv 1 0 1\nv 1 1 1\nv 0 1 1\n\
f 1 4 3 2\nf 5 6 7 8\nf 1 2 6 5\nf 2 3 7 6\nf 3 4 8 7\nf 4 1 5 8\n";
        let p = write_tmp("cube.obj", content);
        let m = load_mesh(&p).unwrap();
        assert_eq!(m.vertices.len(), 8);
        assert_eq!(m.faces.len(), 12);
    }

    #[test]
    fn truncated_obj_errors_with_line() {
        let p = write_tmp("bad.obj", "v 0 0 0\nv 1 0\n");
        match load_mesh(&p) {
            Err(GeometryError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn face_index_out_of_range_errors() {
        let p = write_tmp("oob.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n");
        match load_mesh(&p) {
            Err(GeometryError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn off_reader_and_fan() {
        let content = "\
OFF
4 2 0
0 0 0
1 0 0
1 1 0
0 1 0
3 0 1 2
4 0 1 2 3
";
        let p = write_tmp("quad.off", content);
        let m = load_mesh(&p).unwrap();
        assert_eq!(m.vertices.len(), 4);
        assert_eq!(m.faces.len(), 3); // one triangle + one quad fan-split
    }

    #[test]
    fn off_truncated_errors() {
        let p = write_tmp("trunc.off", "OFF\n4 1 0\n0 0 0\n");
        assert!(matches!(
            load_mesh(&p),
            Err(GeometryError::Parse { .. })
        ));
    }

    #[test]
    fn obj_roundtrip() {
        let m = crate::synth::axis_box([0.0; 3], [1.0, 2.0, 3.0]);
        let dir = std::env::temp_dir().join("shapecorr_meshio_tests");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("roundtrip.obj");
        write_obj(&m, &p).unwrap();
        let m2 = load_mesh(&p).unwrap();
        assert_eq!(m.vertices, m2.vertices);
        assert_eq!(m.faces, m2.faces);
    }
}
