//! File formats: PPM images, binary coefficient files, side information
//! and CSV reports.
//!
//! `.coef` layout (little endian): magic `SPHC`, `u32` version (1),
//! `u32` l_max, `u32` channels, `u8` real flag, then `(re, im)` `f64` pairs
//! in channel-major, `lm_index` order.
//!
//! Side information is a pair: `<name>.sig.json` (metadata, config echo,
//! name of the binary file) and `<name>.sig.bin`: magic `SPHS`, `u32`
//! version, `u32` feature count `F`, `u32` bit count `k`, `F` cover features,
//! `k * F` decision-direction entries, then the realized residual as an
//! embedded `.coef` record.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::codec::{CodecConfig, SignatureSet};
use crate::coupling::BispectrumVector;
use crate::error::{Error, Result};
use crate::grid::ErpImage;
use crate::harmonics::ShCoefficients;

const COEF_MAGIC: &[u8; 4] = b"SPHC";
const SIG_MAGIC: &[u8; 4] = b"SPHS";
const FORMAT_VERSION: u32 = 1;

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Encodes `x` as binary PPM (`P6`, 3 channels) or PGM (`P5`, 1 channel),
/// 8 bits per sample, `byte = round(255 v)`.
pub fn encode_ppm(x: &ErpImage) -> Result<Vec<u8>> {
    let magic = match x.channels() {
        3 => "P6",
        1 => "P5",
        n => return Err(Error::invalid(format!("PPM output needs 1 or 3 channels, got {n}"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", x.width(), x.height()).into_bytes();
    out.extend(x.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ErpImage> {
    let mut pos = 0usize;
    let next_token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::Format("truncated PPM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = next_token(&mut pos)?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(Error::Format(format!("unsupported image magic '{other}' (expected P6 or P5)"))),
    };
    let parse = |s: String, what: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PPM {what} '{s}'")))
    };
    let width = parse(next_token(&mut pos)?, "width")?;
    let height = parse(next_token(&mut pos)?, "height")?;
    let maxval = parse(next_token(&mut pos)?, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("only 8-bit PPM is supported, maxval {maxval}")));
    }
    if width != 2 * height {
        return Err(Error::Format(format!(
            "equirectangular images need width = 2 * height, got {width}x{height}"
        )));
    }
    pos += 1;
    let n = width * height * channels;
    if bytes.len() < pos + n {
        return Err(Error::Format(format!(
            "PPM pixel data truncated: need {n} bytes, have {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    let data = bytes[pos..pos + n].iter().map(|&b| b as f64 / 255.0).collect();
    ErpImage::from_vec(height, channels, data)
}

pub fn read_ppm(path: &Path) -> Result<ErpImage> {
    decode_ppm(&read_file(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_ppm(path: &Path, x: &ErpImage) -> Result<()> {
    write_file(path, &encode_ppm(x)?)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!("unexpected end of data at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        b.copy_from_slice(self.take(4)?);
        Ok(u32::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        b.copy_from_slice(self.take(8)?);
        Ok(f64::from_le_bytes(b))
    }

    fn magic(&mut self, m: &[u8; 4], what: &str) -> Result<()> {
        if self.take(4)? != m {
            return Err(Error::Format(format!("not a {what} file (bad magic)")));
        }
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported {what} version {v}")));
        }
        Ok(())
    }
}

fn encode_coef_into(c: &ShCoefficients, out: &mut Vec<u8>) {
    out.extend_from_slice(COEF_MAGIC);
    put_u32(out, FORMAT_VERSION);
    put_u32(out, c.l_max() as u32);
    put_u32(out, c.channels() as u32);
    out.push(c.is_real() as u8);
    for v in c.raw() {
        put_f64(out, v.re);
        put_f64(out, v.im);
    }
}

pub fn encode_coef(c: &ShCoefficients) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + 16 * c.raw().len());
    encode_coef_into(c, &mut out);
    out
}

fn decode_coef_from(r: &mut Reader) -> Result<ShCoefficients> {
    r.magic(COEF_MAGIC, "coefficient")?;
    let l_max = r.u32()? as usize;
    let channels = r.u32()? as usize;
    let real = match r.take(1)?[0] {
        0 => false,
        1 => true,
        v => return Err(Error::Format(format!("bad real flag {v}"))),
    };
    if channels == 0 || l_max > 4096 {
        return Err(Error::Format(format!("implausible header: l_max {l_max}, channels {channels}")));
    }
    let n = (l_max + 1) * (l_max + 1) * channels;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let re = r.f64()?;
        let im = r.f64()?;
        data.push(Complex64::new(re, im));
    }
    ShCoefficients::from_raw(l_max, channels, real, data)
}

pub fn decode_coef(bytes: &[u8]) -> Result<ShCoefficients> {
    let mut r = Reader { bytes, pos: 0 };
    let c = decode_coef_from(&mut r)?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after coefficients", bytes.len() - r.pos)));
    }
    Ok(c)
}

pub fn read_coef(path: &Path) -> Result<ShCoefficients> {
    decode_coef(&read_file(path)?)
}

pub fn write_coef(path: &Path, c: &ShCoefficients) -> Result<()> {
    write_file(path, &encode_coef(c))
}

/// Coefficients as JSON: `{l_max, channels, real, data: [[re, im], ...]}`.
pub fn coef_to_json(c: &ShCoefficients) -> Result<String> {
    Ok(serde_json::to_string_pretty(c)?)
}

/// Metadata half of the side-information pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideInfoHeader {
    pub format: String,
    pub version: u32,
    pub key: u64,
    pub config: CodecConfig,
    pub height: usize,
    pub channels: usize,
    pub amplitude: f64,
    pub features: usize,
    pub bits: usize,
    /// File name of the binary half, relative to the JSON file.
    pub binary: String,
}

/// `(<name>.sig.json, <name>.sig.bin)` for a stem path.
pub fn side_info_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let s = stem.as_os_str().to_string_lossy().into_owned();
    (PathBuf::from(format!("{s}.sig.json")), PathBuf::from(format!("{s}.sig.bin")))
}

pub fn encode_side_binary(side: &SignatureSet) -> Vec<u8> {
    let f = side.cover_features.len();
    let k = side.directions.len();
    let mut out = Vec::new();
    out.extend_from_slice(SIG_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, f as u32);
    put_u32(&mut out, k as u32);
    side.cover_features.iter().for_each(|&v| put_f64(&mut out, v));
    side.directions.iter().flatten().for_each(|&v| put_f64(&mut out, v));
    encode_coef_into(&side.realized, &mut out);
    out
}

pub fn write_side_info(stem: &Path, side: &SignatureSet) -> Result<(PathBuf, PathBuf)> {
    let (json_path, bin_path) = side_info_paths(stem);
    let header = SideInfoHeader {
        format: "sphmark-side-info".into(),
        version: FORMAT_VERSION,
        key: side.key,
        config: side.config.clone(),
        height: side.height,
        channels: side.channels,
        amplitude: side.amplitude,
        features: side.cover_features.len(),
        bits: side.directions.len(),
        binary: bin_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    write_file(&bin_path, &encode_side_binary(side))?;
    write_file(&json_path, format!("{}\n", serde_json::to_string_pretty(&header)?).as_bytes())?;
    Ok((json_path, bin_path))
}

/// Loads a side-information pair from its JSON path.
pub fn read_side_info(json_path: &Path) -> Result<SignatureSet> {
    let header: SideInfoHeader = serde_json::from_slice(&read_file(json_path)?)?;
    if header.format != "sphmark-side-info" || header.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported side info format '{}' v{}",
            json_path.display(),
            header.format,
            header.version
        )));
    }
    let bin_path = json_path.parent().unwrap_or(Path::new(".")).join(&header.binary);
    let bytes = read_file(&bin_path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    r.magic(SIG_MAGIC, "side information")?;
    let f = r.u32()? as usize;
    let k = r.u32()? as usize;
    if f != header.features || k != header.bits {
        return Err(Error::Format(format!(
            "side info halves disagree: json says {}x{}, binary {k}x{f}",
            header.bits, header.features
        )));
    }
    let cover_features = (0..f).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let directions = (0..k)
        .map(|_| (0..f).map(|_| r.f64()).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let realized = decode_coef_from(&mut r)?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{}: trailing bytes", bin_path.display())));
    }
    Ok(SignatureSet {
        key: header.key,
        config: header.config,
        height: header.height,
        channels: header.channels,
        amplitude: header.amplitude,
        cover_features,
        directions,
        realized,
    })
}

pub fn bispectrum_csv(b: &BispectrumVector) -> String {
    let mut out = String::from("l1,l2,l3,re,im\n");
    for (t, v) in b.triplets.iter().zip(&b.values) {
        out.push_str(&format!("{},{},{},{},{}\n", t.l1, t.l2, t.l3, v.re, v.im));
    }
    out
}

/// Reads an entire stream, mapping failures to I/O errors on `what`.
pub fn read_all(mut r: impl Read, what: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::io(what, e))?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{embed, synthetic_cover, Payload};
    use crate::coupling::{bispectrum_vector, descriptor_triplets};
    use crate::harmonics::synth_random_bandlimited;

    fn quantized(height: usize, channels: usize) -> ErpImage {
        let n = 2 * height * height * channels;
        ErpImage::from_vec(height, channels, (0..n).map(|i| ((i * 37) % 256) as f64 / 255.0).collect()).unwrap()
    }

    #[test]
    fn ppm_round_trip_is_exact_on_quantized_images() {
        for channels in [1, 3] {
            let x = quantized(6, channels);
            let bytes = encode_ppm(&x).unwrap();
            assert!(bytes.starts_with(if channels == 3 { b"P6\n12 6\n255\n" } else { b"P5\n12 6\n255\n" }));
            assert_eq!(decode_ppm(&bytes).unwrap(), x);
        }
    }

    #[test]
    fn ppm_header_comments_are_skipped() {
        let mut bytes = b"P5 # gray\n# size follows\n4 2\n# depth\n255\n".to_vec();
        bytes.extend([0u8, 51, 102, 153, 204, 255, 0, 255]);
        let x = decode_ppm(&bytes).unwrap();
        assert_eq!(x.channels(), 1);
        assert_eq!(x.data()[1], 0.2);
        assert_eq!(x.data()[5], 1.0);
    }

    #[test]
    fn ppm_rejects_malformed_input() {
        let cases: [&[u8]; 6] = [
            b"P3\n4 2\n255\n",
            b"P5\n4 2\n65535\n",
            b"P5\n6 2\n255\n",
            b"P5\n4 2\n255\n\x00\x01",
            b"P5\n4",
            b"P5\nfour 2\n255\n",
        ];
        for c in cases {
            assert!(matches!(decode_ppm(c), Err(Error::Format(_))), "{:?}", String::from_utf8_lossy(c));
        }
    }

    #[test]
    fn coef_round_trip_and_validation() {
        let c = synth_random_bandlimited(5, 3, 11, 1.0).unwrap();
        let bytes = encode_coef(&c);
        assert_eq!(&bytes[..4], b"SPHC");
        assert_eq!(bytes.len(), 17 + 16 * 36 * 3);
        assert_eq!(decode_coef(&bytes).unwrap(), c);

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(decode_coef(&trailing).is_err());
        assert!(decode_coef(&bytes[..bytes.len() - 1]).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(decode_coef(&magic).is_err());
        let mut flag = bytes;
        flag[12] = 7;
        assert!(decode_coef(&flag).is_err());
        assert!(coef_to_json(&c).unwrap().contains("\"l_max\": 5"));
    }

    #[test]
    fn files_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let x = quantized(8, 3);
        let p = dir.path().join("x.ppm");
        write_ppm(&p, &x).unwrap();
        assert_eq!(read_ppm(&p).unwrap(), x);
        let c = synth_random_bandlimited(3, 1, 2, 1.0).unwrap();
        let q = dir.path().join("c.coef");
        write_coef(&q, &c).unwrap();
        assert_eq!(read_coef(&q).unwrap(), c);
        assert!(matches!(read_ppm(&dir.path().join("missing.ppm")), Err(Error::Io { .. })));
    }

    #[test]
    fn side_info_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CodecConfig {
            bits: 8,
            ..CodecConfig::default()
        };
        let x = synthetic_cover(32, cfg.l_max, 3, 1).unwrap();
        let out = embed(&x, &Payload::random(8, 2), 5, &cfg).unwrap();
        let (json, bin) = write_side_info(&dir.path().join("mark"), &out.side).unwrap();
        assert!(json.ends_with("mark.sig.json") && bin.ends_with("mark.sig.bin"));
        assert_eq!(read_side_info(&json).unwrap(), out.side);

        let mut bytes = fs::read(&bin).unwrap();
        bytes.push(1);
        fs::write(&bin, &bytes).unwrap();
        assert!(read_side_info(&json).is_err());
        bytes.pop();
        bytes[8] ^= 1;
        fs::write(&bin, &bytes).unwrap();
        assert!(read_side_info(&json).is_err());
    }

    #[test]
    fn bispectrum_csv_lists_triplets() {
        let c = synth_random_bandlimited(8, 1, 0, 1.0).unwrap();
        let b = bispectrum_vector(&c, &descriptor_triplets(8)).unwrap();
        let csv = bispectrum_csv(&b);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("l1,l2,l3,re,im"));
        assert_eq!(lines.count(), b.values.len());
    }
}
