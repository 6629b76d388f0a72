//! Binary dataset and checkpoint files.
//!
//! All integers and reals are little-endian and fixed width. Both formats are
//! validated in full (magic, version, lengths, trailing bytes) on load.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::icm::{IcmConfig, SnpModelParams, TraitModelParams};
use crate::lfvi::{Optimizers, RowAdam, VariationalState};
use crate::numerics::mlp::{BatchNorm, Dense};
use crate::numerics::{AdamState, Matrix, MlpParams, MlpSpec, RngPosition};
use crate::simgen::{Family, GenotypeMatrix, SimulatedDataset, StructureMatrices};

pub const DATASET_MAGIC: &[u8; 5] = b"ICMG1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ICMC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// magic + M + N + flags
pub const DATASET_HEADER_LEN: usize = 5 + 8 + 8 + 4;

const FLAG_TRAITS: u32 = 1;
const FLAG_TRUTH: u32 = 2;

/// Write to a sibling temporary file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().ok_or_else(|| Error::Config(format!("'{}' is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Encoder::default()
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn bool(&mut self, v: bool) {
        self.u8(v as u8);
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.bytes(s.as_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        v.iter().for_each(|x| self.f64(*x));
    }

    pub fn u64s(&mut self, v: &[u64]) {
        self.usize(v.len());
        v.iter().for_each(|x| self.u64(*x));
    }

    pub fn usizes(&mut self, v: &[usize]) {
        self.usize(v.len());
        v.iter().for_each(|x| self.usize(*x));
    }

    pub fn matrix(&mut self, m: &Matrix) {
        self.usize(m.rows());
        self.usize(m.cols());
        m.as_slice().iter().for_each(|x| self.f64(*x));
    }
}

pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8], what: &'static str) -> Self {
        Decoder { buf, pos: 0, what }
    }

    fn err(&self, msg: impl std::fmt::Display) -> Error {
        Error::Format(format!("{}: {msg} (offset {})", self.what, self.pos))
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.err(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.err(format!("truncated: need {n} bytes, have {}", self.remaining())));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(self.err(format!("invalid flag byte {v}"))),
        }
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.err(format!("length {v} overflows usize")))
    }

    /// A length prefix for `width`-byte items, checked against the bytes left.
    fn len(&mut self, width: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.checked_mul(width).is_none_or(|b| b > self.remaining()) {
            return Err(self.err(format!("length {n} exceeds remaining payload")));
        }
        Ok(n)
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.err("invalid utf-8"))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn u64s(&mut self) -> Result<Vec<u64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.u64()).collect()
    }

    pub fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.usize()).collect()
    }

    pub fn matrix(&mut self) -> Result<Matrix> {
        let r = self.usize()?;
        let c = self.usize()?;
        let n = r.checked_mul(c).ok_or_else(|| self.err("matrix size overflow"))?;
        if n.checked_mul(8).is_none_or(|b| b > self.remaining()) {
            return Err(self.err(format!("{r}x{c} matrix exceeds remaining payload")));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Matrix::from_vec(r, c, data)
    }
}

/// Simulation ground truth carried alongside a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub family: Family,
    pub a: f64,
    pub beta: Vec<f64>,
    pub lambda: Vec<f64>,
    pub sigma: Vec<f64>,
    pub causal: Vec<usize>,
    pub partition: Vec<usize>,
    pub gamma: Matrix,
    pub s: Matrix,
    pub populations: Option<Vec<usize>>,
}

impl Truth {
    pub fn structure(&self) -> StructureMatrices {
        StructureMatrices {
            gamma: self.gamma.clone(),
            s: self.s.clone(),
            family: self.family,
            sparsity_a: self.a,
            populations: self.populations.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub genotypes: GenotypeMatrix,
    pub traits: Option<Vec<f64>>,
    pub truth: Option<Truth>,
}

impl From<SimulatedDataset> for Dataset {
    fn from(sim: SimulatedDataset) -> Self {
        Dataset {
            traits: Some(sim.traits),
            truth: Some(Truth {
                family: sim.structure.family,
                a: sim.structure.sparsity_a,
                beta: sim.beta,
                lambda: sim.lambda,
                sigma: sim.sigma,
                causal: sim.causal_set,
                partition: sim.partition,
                gamma: sim.structure.gamma,
                s: sim.structure.s,
                populations: sim.structure.populations,
            }),
            genotypes: sim.genotypes,
        }
    }
}

impl Dataset {
    pub fn to_bytes(&self) -> Vec<u8> {
        let g = &self.genotypes;
        let mut e = Encoder::new();
        e.bytes(DATASET_MAGIC);
        e.usize(g.snps());
        e.usize(g.individuals());
        let flags = if self.traits.is_some() { FLAG_TRAITS } else { 0 } | if self.truth.is_some() { FLAG_TRUTH } else { 0 };
        e.u32(flags);
        e.bytes(g.bytes());
        if let Some(y) = &self.traits {
            y.iter().for_each(|v| e.f64(*v));
        }
        if let Some(t) = &self.truth {
            e.u8(t.family.code());
            e.f64(t.a);
            e.f64s(&t.beta);
            e.f64s(&t.lambda);
            e.f64s(&t.sigma);
            e.usizes(&t.causal);
            e.usizes(&t.partition);
            e.matrix(&t.gamma);
            e.matrix(&t.s);
            e.bool(t.populations.is_some());
            if let Some(p) = &t.populations {
                e.usizes(p);
            }
        }
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, "dataset");
        if d.take(5).map_err(|_| Error::Format("dataset: shorter than the header".into()))? != DATASET_MAGIC {
            return Err(Error::Format("dataset: bad magic (expected ICMG1)".into()));
        }
        let m = d.usize()?;
        let n = d.usize()?;
        let flags = d.u32()?;
        if flags & !(FLAG_TRAITS | FLAG_TRUTH) != 0 {
            return Err(Error::Format(format!("dataset: unknown flags {flags:#x}")));
        }
        let cells = n.checked_mul(m).ok_or_else(|| Error::Format("dataset: dimension overflow".into()))?;
        if d.remaining() < cells {
            return Err(Error::Format(format!("dataset: payload holds {} bytes, header needs {cells} genotypes", d.remaining())));
        }
        let raw = d.take(cells)?;
        if let Some(i) = raw.iter().position(|&g| g > 2) {
            return Err(Error::Format(format!("dataset: genotype byte {} at entry {i}", raw[i])));
        }
        let genotypes = GenotypeMatrix::new(n, m, raw.to_vec())?;
        let traits = if flags & FLAG_TRAITS != 0 { Some((0..n).map(|_| d.f64()).collect::<Result<Vec<_>>>()?) } else { None };
        let truth = if flags & FLAG_TRUTH != 0 {
            let family = Family::from_code(d.u8()?)?;
            let t = Truth {
                family,
                a: d.f64()?,
                beta: d.f64s()?,
                lambda: d.f64s()?,
                sigma: d.f64s()?,
                causal: d.usizes()?,
                partition: d.usizes()?,
                gamma: d.matrix()?,
                s: d.matrix()?,
                populations: if d.bool()? { Some(d.usizes()?) } else { None },
            };
            if t.beta.len() != m || t.lambda.len() != n || t.sigma.len() != n || t.causal.iter().any(|&c| c >= m) {
                return Err(Error::Format("dataset: truth block does not match header dimensions".into()));
            }
            Some(t)
        } else {
            None
        };
        d.finish()?;
        Ok(Dataset { genotypes, traits, truth })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Dataset::from_bytes(&fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }
}

/// Fitted variational state plus the position of the stream the next
/// stage-1 epoch will draw from.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub rng: RngPosition,
    pub state: VariationalState,
}

fn put_config(e: &mut Encoder, c: &IcmConfig) {
    e.usize(c.k);
    e.usizes(&c.snp_hidden);
    e.usizes(&c.trait_hidden);
    e.str(&c.trait_kind.to_string());
    e.str(&c.snp_model.to_string());
    e.str(&c.trait_model.to_string());
    e.f64(c.group_lasso_scale);
    e.bool(c.batch_norm);
}

fn pair(d: &mut Decoder) -> Result<[usize; 2]> {
    let v = d.usizes()?;
    v.try_into().map_err(|_| Error::Format("checkpoint: expected two hidden sizes".into()))
}

fn get_config(d: &mut Decoder) -> Result<IcmConfig> {
    Ok(IcmConfig {
        k: d.usize()?,
        snp_hidden: pair(d)?,
        trait_hidden: pair(d)?,
        trait_kind: d.str()?.parse()?,
        snp_model: d.str()?.parse()?,
        trait_model: d.str()?.parse()?,
        group_lasso_scale: d.f64()?,
        batch_norm: d.bool()?,
    })
}

fn put_mlp(e: &mut Encoder, p: &MlpParams) {
    let s = &p.spec;
    e.usize(s.input_dim);
    e.usizes(&s.hidden_dims);
    e.usize(s.output_dim);
    e.bool(s.use_batch_norm);
    e.bool(s.skip_inputs_to_output.is_some());
    if let Some(r) = &s.skip_inputs_to_output {
        e.usize(r.start);
        e.usize(r.end);
    }
    for l in &p.layers {
        e.matrix(&l.weight);
        e.f64s(&l.bias);
    }
    e.bool(p.norms.is_some());
    if let Some(norms) = &p.norms {
        for b in norms {
            e.f64s(&b.gamma);
            e.f64s(&b.beta);
            e.f64s(&b.running_mean);
            e.f64s(&b.running_var);
        }
    }
}

fn get_mlp(d: &mut Decoder) -> Result<MlpParams> {
    let mut spec = MlpSpec::new(d.usize()?, pair(d)?, d.usize()?).with_batch_norm(d.bool()?);
    if d.bool()? {
        let (a, b) = (d.usize()?, d.usize()?);
        spec = spec.with_skip(a..b);
    }
    spec.validate()?;
    let mut dense = || -> Result<Dense> { Ok(Dense { weight: d.matrix()?, bias: d.f64s()? }) };
    let layers = [dense()?, dense()?, dense()?];
    for (l, (i, o)) in layers.iter().zip(spec.layer_dims()) {
        if l.weight.shape() != (i, o) || l.bias.len() != o {
            return Err(Error::Format("checkpoint: network layer shape does not match its spec".into()));
        }
    }
    let norms = if d.bool()? {
        let mut bn = || -> Result<BatchNorm> {
            Ok(BatchNorm { gamma: d.f64s()?, beta: d.f64s()?, running_mean: d.f64s()?, running_var: d.f64s()? })
        };
        Some([bn()?, bn()?])
    } else {
        None
    };
    if norms.is_some() != spec.use_batch_norm {
        return Err(Error::Format("checkpoint: batch-norm block does not match its spec".into()));
    }
    Ok(MlpParams { spec, layers, norms })
}

fn put_adam(e: &mut Encoder, a: &AdamState) {
    e.u64(a.step);
    e.f64(a.step_size);
    e.f64(a.beta1);
    e.f64(a.beta2);
    e.f64(a.eps);
    e.f64s(&a.m);
    e.f64s(&a.v);
}

fn get_adam(d: &mut Decoder) -> Result<AdamState> {
    Ok(AdamState { step: d.u64()?, step_size: d.f64()?, beta1: d.f64()?, beta2: d.f64()?, eps: d.f64()?, m: d.f64s()?, v: d.f64s()? })
}

fn put_row_adam(e: &mut Encoder, a: &RowAdam) {
    e.f64(a.step_size);
    e.usize(a.width);
    e.u64s(&a.steps);
    e.f64s(&a.m);
    e.f64s(&a.v);
}

fn get_row_adam(d: &mut Decoder) -> Result<RowAdam> {
    Ok(RowAdam { step_size: d.f64()?, width: d.usize()?, steps: d.u64s()?, m: d.f64s()?, v: d.f64s()? })
}

fn put_option<T>(e: &mut Encoder, v: &Option<T>, f: impl Fn(&mut Encoder, &T)) {
    e.bool(v.is_some());
    if let Some(x) = v {
        f(e, x);
    }
}

fn get_option<T>(d: &mut Decoder, f: impl Fn(&mut Decoder) -> Result<T>) -> Result<Option<T>> {
    if d.bool()? {
        Ok(Some(f(d)?))
    } else {
        Ok(None)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.state;
        let mut e = Encoder::new();
        e.bytes(CHECKPOINT_MAGIC);
        e.u32(CHECKPOINT_VERSION);
        e.u64(self.seed);
        e.u64(self.rng.seed);
        e.u64(self.rng.stream);
        e.bytes(&self.rng.word_pos.to_le_bytes());
        put_config(&mut e, &s.config);
        for m in [&s.mu_z, &s.log_sigma_z, &s.mu_w, &s.log_sigma_w] {
            e.matrix(m);
        }
        match &s.phi {
            SnpModelParams::LogisticFa => e.u8(0),
            SnpModelParams::Neural(p) => {
                e.u8(1);
                put_mlp(&mut e, p);
            }
        }
        put_option(&mut e, &s.theta, |e, t| match t {
            TraitModelParams::Linear { m, k, coef, bias } => {
                e.u8(0);
                e.usize(*m);
                e.usize(*k);
                e.f64s(coef);
                e.f64(*bias);
            }
            TraitModelParams::Neural { m, k, net } => {
                e.u8(1);
                e.usize(*m);
                e.usize(*k);
                put_mlp(e, net);
            }
        });
        put_option(&mut e, &s.ratio, put_mlp);
        let o = &s.opt;
        for r in [&o.mu_z, &o.log_sigma_z, &o.mu_w, &o.log_sigma_w] {
            put_row_adam(&mut e, r);
        }
        put_adam(&mut e, &o.phi);
        put_option(&mut e, &o.theta, put_adam);
        put_option(&mut e, &o.ratio, put_adam);
        e.usize(s.stage1_epochs);
        e.usize(s.stage2_epochs);
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, "checkpoint");
        if d.take(4).map_err(|_| Error::Format("checkpoint: shorter than the header".into()))? != CHECKPOINT_MAGIC {
            return Err(Error::Format("checkpoint: bad magic (expected ICMC)".into()));
        }
        let version = d.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("checkpoint: version {version}, this build reads version {CHECKPOINT_VERSION}")));
        }
        let seed = d.u64()?;
        let rng = RngPosition {
            seed: d.u64()?,
            stream: d.u64()?,
            word_pos: u128::from_le_bytes(d.take(16)?.try_into().expect("16 bytes")),
        };
        let config = get_config(&mut d)?;
        config.validate()?;
        let (mu_z, log_sigma_z, mu_w, log_sigma_w) = (d.matrix()?, d.matrix()?, d.matrix()?, d.matrix()?);
        let phi = match d.u8()? {
            0 => SnpModelParams::LogisticFa,
            1 => SnpModelParams::Neural(get_mlp(&mut d)?),
            t => return Err(Error::Format(format!("checkpoint: unknown SNP model tag {t}"))),
        };
        let theta = get_option(&mut d, |d| match d.u8()? {
            0 => Ok(TraitModelParams::Linear { m: d.usize()?, k: d.usize()?, coef: d.f64s()?, bias: d.f64()? }),
            1 => Ok(TraitModelParams::Neural { m: d.usize()?, k: d.usize()?, net: get_mlp(d)? }),
            t => Err(Error::Format(format!("checkpoint: unknown trait model tag {t}"))),
        })?;
        let ratio = get_option(&mut d, get_mlp)?;
        let opt = Optimizers {
            mu_z: get_row_adam(&mut d)?,
            log_sigma_z: get_row_adam(&mut d)?,
            mu_w: get_row_adam(&mut d)?,
            log_sigma_w: get_row_adam(&mut d)?,
            phi: get_adam(&mut d)?,
            theta: get_option(&mut d, get_adam)?,
            ratio: get_option(&mut d, get_adam)?,
        };
        let state = VariationalState {
            config,
            mu_z,
            log_sigma_z,
            mu_w,
            log_sigma_w,
            phi,
            theta,
            ratio,
            opt,
            stage1_epochs: d.usize()?,
            stage2_epochs: d.usize()?,
        };
        d.finish()?;
        let (n, m, k) = (state.mu_z.rows(), state.mu_w.rows(), state.config.k);
        let shapes_ok = state.mu_z.cols() == k
            && state.mu_w.cols() == k
            && state.log_sigma_z.shape() == (n, k)
            && state.log_sigma_w.shape() == (m, k)
            && state.opt.mu_z.steps.len() == n
            && state.opt.mu_w.steps.len() == m;
        if !shapes_ok {
            return Err(Error::Format("checkpoint: variational parameter shapes are inconsistent".into()));
        }
        Ok(Checkpoint { seed, rng, state })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }
}
