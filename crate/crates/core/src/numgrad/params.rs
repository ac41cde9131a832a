use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GradError, Tensor};

/// Which network a parameter set belongs to. Fixed at creation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    TeacherHigh,
    TeacherValue,
    /// Low-level executor for one agent class (index within the domain).
    TeacherLow(u8),
    Student,
    /// Scratch sets used by tests and auxiliary learners.
    Other,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::TeacherHigh => write!(f, "teacher_high"),
            Role::TeacherValue => write!(f, "teacher_value"),
            Role::TeacherLow(c) => write!(f, "teacher_low{c}"),
            Role::Student => write!(f, "student"),
            Role::Other => write!(f, "other"),
        }
    }
}

impl Role {
    fn parse(s: &str) -> Option<Role> {
        match s {
            "teacher_high" => Some(Role::TeacherHigh),
            "teacher_value" => Some(Role::TeacherValue),
            "student" => Some(Role::Student),
            "other" => Some(Role::Other),
            _ => s.strip_prefix("teacher_low").and_then(|c| c.parse().ok()).map(Role::TeacherLow),
        }
    }
}

/// Named collection of real-valued parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    role: Role,
    entries: BTreeMap<String, Tensor>,
}

const MAGIC: &[u8; 8] = b"HINTPSET";
const FORMAT_VERSION: u32 = 1;

impl ParamSet {
    pub fn new(role: Role) -> Self {
        Self { role, entries: BTreeMap::new() }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), GradError> {
        let name = name.into();
        if !value.is_finite() {
            return Err(GradError::NonFinite { node: name });
        }
        if self.entries.contains_key(&name) {
            return Err(GradError::DuplicateParam(name));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    /// Adds `{prefix}.w` of shape `[fan_out, fan_in]` and `{prefix}.b` of shape `[fan_out]`,
    /// both uniform in `±sqrt(1/fan_in)`.
    pub fn add_affine<R: Rng>(
        &mut self,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<(), GradError> {
        self.add_uniform(&format!("{prefix}.w"), &[fan_out, fan_in], fan_in, rng)?;
        self.add_uniform(&format!("{prefix}.b"), &[fan_out], fan_in, rng)
    }

    /// Adds a weight matrix without bias.
    pub fn add_linear<R: Rng>(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<(), GradError> {
        self.add_uniform(name, &[fan_out, fan_in], fan_in, rng)
    }

    fn add_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<(), GradError> {
        let bound = (1.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Sets every value to zero (used for deterministic baselines).
    pub fn zero_all(&mut self) {
        for t in self.entries.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Bitwise equality of names, shapes and values.
    pub fn same_bits(&self, other: &ParamSet) -> bool {
        self.role == other.role
            && self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.same_bits(vb))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        write_str(&mut w, &self.role.to_string())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            write_str(&mut w, name)?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, GradError> {
        let bad = |m: &str| GradError::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not a parameter checkpoint"));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let role_s = read_str(&mut r)?;
        let role = Role::parse(&role_s).ok_or_else(|| bad(&format!("unknown role {role_s}")))?;
        let count = read_u32(&mut r)?;
        let mut set = ParamSet::new(role);
        for _ in 0..count {
            let name = read_str(&mut r)?;
            let ndim = read_u32(&mut r)? as usize;
            if ndim == 0 || ndim > 8 {
                return Err(bad("bad rank"));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|_| bad("truncated shape"))?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            if n > 1 << 28 {
                return Err(bad("entry too large"));
            }
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|_| bad("truncated values"))?;
                data.push(f64::from_le_bytes(b));
            }
            set.insert(name, Tensor::new(shape, data)?)?;
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| bad(&e.to_string()))? != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(set)
    }

    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()
    }

    pub fn load(path: &std::path::Path) -> Result<Self, GradError> {
        let f = std::fs::File::open(path)
            .map_err(|e| GradError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, GradError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| GradError::Checkpoint("truncated record".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String, GradError> {
    let n = read_u32(r)? as usize;
    if n > 4096 {
        return Err(GradError::Checkpoint("name too long".into()));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(|_| GradError::Checkpoint("truncated name".into()))?;
    String::from_utf8(b).map_err(|_| GradError::Checkpoint("name is not utf-8".into()))
}
