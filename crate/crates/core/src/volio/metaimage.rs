//! MetaImage (`.mha`, header + LOCAL payload) reader and writer.
//!
//! Scalar volumes are stored as little-endian MET_FLOAT, masks as
//! MET_UCHAR, and 3-channel vector fields as MET_DOUBLE so displacement
//! fields keep full precision for Jacobian computations. Header floats are
//! printed with Rust's shortest round-trip formatting, which makes a
//! write/read/write cycle byte-identical.

use std::path::Path;

use crate::error::{Error, Result};
use crate::volio::atomic_write;
use crate::volume::{BinaryMask, Geometry, VectorField3D, Volume3D};

/// Decoded content of a MetaImage file.
#[derive(Debug, Clone, PartialEq)]
pub enum MetaObject {
    Volume(Volume3D),
    Mask(BinaryMask),
    Field(VectorField3D),
}

impl MetaObject {
    pub fn geometry(&self) -> &Geometry {
        match self {
            MetaObject::Volume(v) => &v.geometry,
            MetaObject::Mask(m) => &m.geometry,
            MetaObject::Field(f) => &f.geometry,
        }
    }

    pub fn into_volume(self) -> Result<Volume3D> {
        match self {
            MetaObject::Volume(v) => Ok(v),
            MetaObject::Mask(m) => Ok(m.to_volume()),
            MetaObject::Field(_) => Err(Error::invalid("expected a scalar volume, found a vector field")),
        }
    }

    pub fn into_mask(self) -> Result<BinaryMask> {
        match self {
            MetaObject::Mask(m) => Ok(m),
            MetaObject::Volume(v) => {
                let voxels: Result<Vec<u8>> = v
                    .voxels
                    .iter()
                    .map(|&x| {
                        if x == 0.0 || x == 1.0 {
                            Ok(x as u8)
                        } else {
                            Err(Error::invalid(format!("volume is not binary (found {x})")))
                        }
                    })
                    .collect();
                BinaryMask::new(v.geometry, voxels?)
            }
            MetaObject::Field(_) => Err(Error::invalid("expected a mask, found a vector field")),
        }
    }

    pub fn into_field(self) -> Result<VectorField3D> {
        match self {
            MetaObject::Field(f) => Ok(f),
            _ => Err(Error::invalid("expected a 3-channel vector field")),
        }
    }
}

/// Borrowed view for writing.
#[derive(Debug, Clone, Copy)]
pub enum MetaObjectRef<'a> {
    Volume(&'a Volume3D),
    Mask(&'a BinaryMask),
    Field(&'a VectorField3D),
}

impl<'a> From<&'a Volume3D> for MetaObjectRef<'a> {
    fn from(v: &'a Volume3D) -> Self {
        MetaObjectRef::Volume(v)
    }
}
impl<'a> From<&'a BinaryMask> for MetaObjectRef<'a> {
    fn from(m: &'a BinaryMask) -> Self {
        MetaObjectRef::Mask(m)
    }
}
impl<'a> From<&'a VectorField3D> for MetaObjectRef<'a> {
    fn from(f: &'a VectorField3D) -> Self {
        MetaObjectRef::Field(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ElementType {
    Uchar,
    Float,
    Double,
}

impl ElementType {
    fn size(self) -> usize {
        match self {
            ElementType::Uchar => 1,
            ElementType::Float => 4,
            ElementType::Double => 8,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ElementType::Uchar => "MET_UCHAR",
            ElementType::Float => "MET_FLOAT",
            ElementType::Double => "MET_DOUBLE",
        }
    }
}

pub fn write_metaimage<'a>(obj: impl Into<MetaObjectRef<'a>>, path: &Path) -> Result<()> {
    let obj = obj.into();
    let (geometry, channels, elem, payload) = match obj {
        MetaObjectRef::Volume(v) => {
            let mut bytes = Vec::with_capacity(4 * v.voxels.len());
            for &x in &v.voxels {
                bytes.extend_from_slice(&(x as f32).to_le_bytes());
            }
            (&v.geometry, 1usize, ElementType::Float, bytes)
        }
        MetaObjectRef::Mask(m) => (&m.geometry, 1, ElementType::Uchar, m.voxels.clone()),
        MetaObjectRef::Field(f) => {
            let mut bytes = Vec::with_capacity(24 * f.vectors.len());
            for v in &f.vectors {
                for c in 0..3 {
                    bytes.extend_from_slice(&v[c].to_le_bytes());
                }
            }
            (&f.geometry, 3, ElementType::Double, bytes)
        }
    };

    let mut out = String::new();
    out.push_str("ObjectType = Image\n");
    out.push_str("NDims = 3\n");
    out.push_str("BinaryData = True\n");
    out.push_str("BinaryDataByteOrderMSB = False\n");
    out.push_str(&format!(
        "TransformMatrix = {}\n",
        geometry
            .direction
            .iter()
            .flatten()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    ));
    out.push_str(&format!(
        "Offset = {} {} {}\n",
        geometry.origin[0], geometry.origin[1], geometry.origin[2]
    ));
    out.push_str(&format!(
        "ElementSpacing = {} {} {}\n",
        geometry.spacing[0], geometry.spacing[1], geometry.spacing[2]
    ));
    out.push_str(&format!(
        "DimSize = {} {} {}\n",
        geometry.dims[0], geometry.dims[1], geometry.dims[2]
    ));
    out.push_str(&format!("ElementNumberOfChannels = {channels}\n"));
    out.push_str(&format!("ElementType = {}\n", elem.name()));
    out.push_str("ElementDataFile = LOCAL\n");

    let mut bytes = out.into_bytes();
    bytes.extend_from_slice(&payload);
    atomic_write(path, &bytes)
}

pub fn read_metaimage(path: &Path) -> Result<MetaObject> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    parse_metaimage(&bytes)
}

fn parse_metaimage(bytes: &[u8]) -> Result<MetaObject> {
    // The header is ASCII lines "Key = Value" terminated by ElementDataFile.
    let mut pos = 0usize;
    let mut dims: Option<[usize; 3]> = None;
    let mut spacing = [1.0f64; 3];
    let mut origin = [0.0f64; 3];
    let mut direction = crate::volume::IDENTITY_DIRECTION;
    let mut channels = 1usize;
    let mut elem: Option<ElementType> = None;
    let mut saw_data_file = false;

    while pos < bytes.len() {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| pos + i)
            .ok_or_else(|| Error::format("header not terminated by ElementDataFile"))?;
        let line = std::str::from_utf8(&bytes[pos..end])
            .map_err(|_| Error::format("header is not valid UTF-8"))?
            .trim_end_matches('\r');
        pos = end + 1;

        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| Error::format(format!("malformed header line {line:?}")))?;
        match key {
            "ObjectType" => {
                if value != "Image" {
                    return Err(Error::format(format!("ObjectType: expected Image, got {value}")));
                }
            }
            "NDims" => {
                if value != "3" {
                    return Err(Error::format(format!("NDims: expected 3, got {value}")));
                }
            }
            "BinaryData" => {
                if !value.eq_ignore_ascii_case("true") {
                    return Err(Error::format("BinaryData: only binary payloads are supported"));
                }
            }
            "BinaryDataByteOrderMSB" => {
                if value.eq_ignore_ascii_case("true") {
                    return Err(Error::format("BinaryDataByteOrderMSB: big-endian payloads are not supported"));
                }
            }
            "CompressedData" => {
                if value.eq_ignore_ascii_case("true") {
                    return Err(Error::format("CompressedData: compression is not supported"));
                }
            }
            "TransformMatrix" => {
                let v = parse_floats(value, 9, "TransformMatrix")?;
                for r in 0..3 {
                    for c in 0..3 {
                        direction[r][c] = v[3 * r + c];
                    }
                }
            }
            "Offset" | "Origin" => {
                let v = parse_floats(value, 3, key)?;
                origin = [v[0], v[1], v[2]];
            }
            "ElementSpacing" => {
                let v = parse_floats(value, 3, "ElementSpacing")?;
                spacing = [v[0], v[1], v[2]];
            }
            "DimSize" => {
                let v: Vec<usize> = value
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| Error::format(format!("DimSize: bad value {t:?}"))))
                    .collect::<Result<_>>()?;
                if v.len() != 3 {
                    return Err(Error::format(format!("DimSize: expected 3 values, got {}", v.len())));
                }
                dims = Some([v[0], v[1], v[2]]);
            }
            "ElementNumberOfChannels" => {
                channels = value
                    .parse()
                    .map_err(|_| Error::format(format!("ElementNumberOfChannels: bad value {value:?}")))?;
                if channels != 1 && channels != 3 {
                    return Err(Error::format(format!(
                        "ElementNumberOfChannels: expected 1 or 3, got {channels}"
                    )));
                }
            }
            "ElementType" => {
                elem = Some(match value {
                    "MET_UCHAR" => ElementType::Uchar,
                    "MET_FLOAT" => ElementType::Float,
                    "MET_DOUBLE" => ElementType::Double,
                    other => return Err(Error::format(format!("ElementType: unsupported {other}"))),
                });
            }
            "ElementDataFile" => {
                if value != "LOCAL" {
                    return Err(Error::format(format!(
                        "ElementDataFile: only LOCAL payloads are supported, got {value}"
                    )));
                }
                saw_data_file = true;
                break;
            }
            // Unknown keys are tolerated for interoperability.
            _ => {}
        }
    }

    if !saw_data_file {
        return Err(Error::format("header not terminated by ElementDataFile"));
    }
    let dims = dims.ok_or_else(|| Error::format("DimSize: missing"))?;
    let elem = elem.ok_or_else(|| Error::format("ElementType: missing"))?;

    let geometry = Geometry::new(dims, spacing, origin, direction)
        .map_err(|e| Error::format(format!("invalid geometry: {e}")))?;
    let nvox = geometry.voxel_count();
    let payload = &bytes[pos..];
    let expected = nvox * channels * elem.size();
    if payload.len() != expected {
        return Err(Error::format(format!(
            "size mismatch: DimSize {dims:?} x {channels} channel(s) of {} needs {expected} bytes, payload has {}",
            elem.name(),
            payload.len()
        )));
    }

    let scalars: Vec<f64> = match elem {
        ElementType::Uchar => payload.iter().map(|&b| f64::from(b)).collect(),
        ElementType::Float => payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect(),
        ElementType::Double => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };

    if channels == 3 {
        let vectors: Vec<[f64; 3]> = scalars.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        return Ok(MetaObject::Field(
            VectorField3D::new(geometry, vectors).map_err(|e| Error::format(e.to_string()))?,
        ));
    }
    if elem == ElementType::Uchar && scalars.iter().all(|&v| v == 0.0 || v == 1.0) {
        return Ok(MetaObject::Mask(
            BinaryMask::new(geometry, scalars.iter().map(|&v| v as u8).collect())
                .map_err(|e| Error::format(e.to_string()))?,
        ));
    }
    Ok(MetaObject::Volume(
        Volume3D::new(geometry, scalars).map_err(|e| Error::format(e.to_string()))?,
    ))
}

fn parse_floats(value: &str, n: usize, key: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = value
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::format(format!("{key}: bad value {t:?}"))))
        .collect::<Result<_>>()?;
    if v.len() != n {
        return Err(Error::format(format!("{key}: expected {n} values, got {}", v.len())));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn geom() -> Geometry {
        Geometry::axis_aligned([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn zero_volume_writes_expected_header_and_payload() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("zeros.mha");
        let vol = Volume3D::filled(geom(), 0.0);
        write_metaimage(&vol, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.contains("DimSize = 2 2 2"));
        assert!(text.contains("ElementType = MET_FLOAT"));
        assert!(text.contains("ElementDataFile = LOCAL"));
        // 8 float zeros after the header.
        assert!(bytes.ends_with(&[0u8; 32]));
    }

    #[test]
    fn field_writes_three_channels() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("field.mha");
        let field = VectorField3D::zeros(geom());
        write_metaimage(&field, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap_or_else(|_| {
            String::from_utf8_lossy(&std::fs::read(&path).unwrap()).into_owned()
        });
        assert!(text.contains("ElementNumberOfChannels = 3"));
        assert!(text.contains("ElementType = MET_DOUBLE"));
        match read_metaimage(&path).unwrap() {
            MetaObject::Field(f) => assert_eq!(f.vectors.len(), 8),
            other => panic!("expected field, got {other:?}"),
        }
    }

    #[test]
    fn size_mismatch_is_reported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.mha");
        let mut header = String::new();
        header.push_str("ObjectType = Image\nNDims = 3\nDimSize = 4 4 4\n");
        header.push_str("ElementType = MET_FLOAT\nElementDataFile = LOCAL\n");
        let mut bytes = header.into_bytes();
        bytes.extend_from_slice(&vec![0u8; 63 * 4]); // one float short
        std::fs::write(&path, bytes).unwrap();
        let err = read_metaimage(&path).unwrap_err();
        assert!(err.to_string().contains("size mismatch"), "{err}");
    }

    #[test]
    fn ndims_and_element_type_are_validated() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("nd.mha");
        std::fs::write(&path, b"NDims = 2\nElementDataFile = LOCAL\n").unwrap();
        let err = read_metaimage(&path).unwrap_err();
        assert!(err.to_string().contains("NDims"), "{err}");

        std::fs::write(
            &path,
            b"NDims = 3\nDimSize = 2 2 2\nElementType = MET_SHORT\nElementDataFile = LOCAL\n",
        )
        .unwrap();
        let err = read_metaimage(&path).unwrap_err();
        assert!(err.to_string().contains("ElementType"), "{err}");
    }

    #[test]
    fn uchar_non_binary_loads_as_volume() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("u8vol.mha");
        let mut bytes =
            b"ObjectType = Image\nNDims = 3\nDimSize = 2 2 2\nElementType = MET_UCHAR\nElementDataFile = LOCAL\n"
                .to_vec();
        bytes.extend_from_slice(&[0, 1, 2, 3, 4, 5, 6, 7]);
        std::fs::write(&path, bytes).unwrap();
        match read_metaimage(&path).unwrap() {
            MetaObject::Volume(v) => assert_eq!(v.voxels[5], 5.0),
            other => panic!("expected volume, got {other:?}"),
        }
    }

    fn arb_geometry() -> impl Strategy<Value = Geometry> {
        (
            proptest::array::uniform3(2usize..5),
            proptest::array::uniform3(0.25f64..4.0),
            proptest::array::uniform3(-20.0f64..20.0),
        )
            .prop_map(|(dims, spacing, origin)| {
                Geometry::axis_aligned(dims, spacing, origin).unwrap()
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        // Round trips are bit-exact for all three object kinds. Volume
        // payloads are 32-bit, so voxels are drawn as f32 values.
        #[test]
        fn prop_round_trip_volume(g in arb_geometry(), seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let voxels: Vec<f64> = (0..g.voxel_count())
                .map(|_| f64::from(rng.gen_range(-1.0e3f32..1.0e3)))
                .collect();
            let vol = Volume3D::new(g, voxels).unwrap();
            let dir = tempdir().unwrap();
            let p1 = dir.path().join("a.mha");
            let p2 = dir.path().join("b.mha");
            write_metaimage(&vol, &p1).unwrap();
            let back = read_metaimage(&p1).unwrap();
            prop_assert_eq!(&back, &MetaObject::Volume(vol));
            match &back {
                MetaObject::Volume(v) => write_metaimage(v, &p2).unwrap(),
                _ => unreachable!(),
            }
            prop_assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        }

        #[test]
        fn prop_round_trip_mask_and_field(g in arb_geometry(), seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mask = BinaryMask::new(
                g.clone(),
                (0..g.voxel_count()).map(|_| rng.gen_range(0u8..2)).collect(),
            ).unwrap();
            let field = VectorField3D::new(
                g.clone(),
                (0..g.voxel_count())
                    .map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)])
                    .collect(),
            ).unwrap();
            let dir = tempdir().unwrap();
            let pm = dir.path().join("m.mha");
            let pf = dir.path().join("f.mha");
            write_metaimage(&mask, &pm).unwrap();
            write_metaimage(&field, &pf).unwrap();
            prop_assert_eq!(read_metaimage(&pm).unwrap(), MetaObject::Mask(mask));
            prop_assert_eq!(read_metaimage(&pf).unwrap(), MetaObject::Field(field));
        }
    }
}
