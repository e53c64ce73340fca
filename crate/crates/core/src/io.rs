//! Serialization helpers: hex fixed-point fields, run-length hex bitsets, atomic writes.

use std::io::Write;
use std::path::Path;

use fixedbitset::FixedBitSet;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::torus::{GeneratorSet, MAX_K};

fn parse_hex(s: &str) -> std::result::Result<u64, String> {
    let t = s.strip_prefix("0x").unwrap_or(s);
    u64::from_str_radix(t, 16).map_err(|e| format!("bad hex {s:?}: {e}"))
}

pub mod hex_u64 {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("0x{v:016x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        super::parse_hex(&s).map_err(D::Error::custom)
    }
}

pub mod hex_vec {
    use serde::{de::Error as _, ser::SerializeSeq, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for x in v {
            seq.serialize_element(&format!("0x{x:016x}"))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u64>, D::Error> {
        let v = Vec::<String>::deserialize(d)?;
        v.iter().map(|s| super::parse_hex(s).map_err(D::Error::custom)).collect()
    }
}

/// JSON form of a generator set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorDoc {
    pub seed: u64,
    pub k: usize,
    pub d: usize,
    #[serde(rename = "B")]
    pub bits: u32,
    pub freeness_radius: u32,
    pub redraws: u32,
    pub x: Vec<Vec<String>>,
}

impl From<&GeneratorSet> for GeneratorDoc {
    fn from(g: &GeneratorSet) -> Self {
        Self {
            seed: g.seed,
            k: g.k,
            d: g.d,
            bits: g.bits,
            freeness_radius: g.freeness_radius,
            redraws: g.redraws,
            x: g.x.iter().map(|v| v[..g.k].iter().map(|c| format!("0x{c:016x}")).collect()).collect(),
        }
    }
}

impl GeneratorDoc {
    pub fn to_generators(&self) -> Result<GeneratorSet> {
        let mut x = Vec::with_capacity(self.d);
        for v in &self.x {
            if v.len() != self.k || self.k > MAX_K {
                return Err(Error::InvalidArgument("generator vector length differs from k".into()));
            }
            let mut a = [0u64; MAX_K];
            for (i, s) in v.iter().enumerate() {
                a[i] = parse_hex(s).map_err(Error::InvalidArgument)?;
            }
            x.push(a);
        }
        if x.len() != self.d {
            return Err(Error::InvalidArgument("number of generators differs from d".into()));
        }
        Ok(GeneratorSet {
            k: self.k,
            d: self.d,
            bits: self.bits,
            x,
            seed: self.seed,
            freeness_radius: self.freeness_radius,
            redraws: self.redraws,
        })
    }
}

/// Run-length encoding of a bitset: alternating run lengths starting with a
/// run of zeros, each as lowercase hex, joined by `.`.
pub fn rle_hex(bits: &FixedBitSet) -> String {
    let mut runs = Vec::new();
    let mut cur = false;
    let mut len = 0usize;
    for i in 0..bits.len() {
        let b = bits.contains(i);
        if b != cur {
            runs.push(len);
            cur = b;
            len = 0;
        }
        len += 1;
    }
    runs.push(len);
    runs.iter().map(|r| format!("{r:x}")).collect::<Vec<_>>().join(".")
}

pub fn rle_hex_decode(s: &str) -> Result<FixedBitSet> {
    let mut runs = Vec::new();
    for part in s.split('.') {
        runs.push(usize::from_str_radix(part, 16).map_err(|e| Error::InvalidArgument(format!("rle: {e}")))?);
    }
    let total: usize = runs.iter().sum();
    let mut out = FixedBitSet::with_capacity(total);
    let mut pos = 0;
    for (i, r) in runs.iter().enumerate() {
        if i % 2 == 1 {
            out.insert_range(pos..pos + r);
        }
        pos += r;
    }
    Ok(out)
}

/// Writes via a temporary file in the target directory, then renames.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::Io(e)
    })
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    atomic_write(path, s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus::{demo_regions, sample_generators, Region};
    use proptest::prelude::*;

    #[test]
    fn region_json_roundtrip() {
        let (a, b) = demo_regions(0.125, 62);
        let u = Region::Union { parts: vec![a.clone(), b] };
        let s = serde_json::to_string(&u).unwrap();
        assert!(s.contains("\"kind\":\"union\""));
        let back: Region = serde_json::from_str(&s).unwrap();
        assert_eq!(back, u);
    }

    #[test]
    fn generator_doc_roundtrip() {
        let g = sample_generators(7, 2, 3, 62, 4).unwrap();
        let doc = GeneratorDoc::from(&g);
        let s = serde_json::to_string(&doc).unwrap();
        let back: GeneratorDoc = serde_json::from_str(&s).unwrap();
        assert_eq!(back.to_generators().unwrap(), g);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = std::env::temp_dir().join(format!("sq-io-{}", std::process::id()));
        let p = dir.join("x.json");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        std::fs::remove_dir_all(&dir).unwrap();
    }

    proptest! {
        #[test]
        fn rle_roundtrip(v in prop::collection::vec(any::<bool>(), 0..300)) {
            let mut b = FixedBitSet::with_capacity(v.len());
            for (i, &x) in v.iter().enumerate() { b.set(i, x); }
            let back = rle_hex_decode(&rle_hex(&b)).unwrap();
            prop_assert_eq!(back, b);
        }
    }
}
