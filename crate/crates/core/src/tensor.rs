//! Tensor fields with typed index slots and covariant derivatives.

use crate::error::{Error, Result};
use crate::grid::{Differentiator, Dir, Field};
use crate::linalg::{c, C64};

/// Index type of one tensor slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Slot {
    /// Contravariant index of type (1,0).
    Upper,
    /// Contravariant index of type (0,1).
    UpperBar,
    /// Covariant index of type (1,0).
    Lower,
    /// Covariant index of type (0,1).
    LowerBar,
}

impl Slot {
    pub fn is_holo(self) -> bool {
        matches!(self, Slot::Upper | Slot::Lower)
    }

    pub fn is_upper(self) -> bool {
        matches!(self, Slot::Upper | Slot::UpperBar)
    }

    pub fn conj(self) -> Slot {
        match self {
            Slot::Upper => Slot::UpperBar,
            Slot::UpperBar => Slot::Upper,
            Slot::Lower => Slot::LowerBar,
            Slot::LowerBar => Slot::Lower,
        }
    }
}

/// Components `comps[flat(idx)]`, flattened row-major over the slots.
#[derive(Clone, Debug)]
pub struct TensorField {
    n: usize,
    sig: Vec<Slot>,
    comps: Vec<Field>,
}

impl TensorField {
    pub fn new(n: usize, sig: Vec<Slot>, comps: Vec<Field>) -> Result<Self> {
        let expected = n.pow(sig.len() as u32);
        if comps.len() != expected {
            return Err(Error::Signature(format!(
                "signature {:?} needs {} components, got {}",
                sig,
                expected,
                comps.len()
            )));
        }
        if let Some(first) = comps.first() {
            if let Some(bad) = comps.iter().find(|f| f.len() != first.len()) {
                return Err(Error::DimensionMismatch { expected: first.len(), got: bad.len() });
            }
        }
        Ok(Self { n, sig, comps })
    }

    pub fn zeros(n: usize, sig: Vec<Slot>, len: usize) -> Self {
        let count = n.pow(sig.len() as u32);
        Self { n, sig, comps: vec![vec![c(0.0, 0.0); len]; count] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rank(&self) -> usize {
        self.sig.len()
    }

    pub fn sig(&self) -> &[Slot] {
        &self.sig
    }

    /// Number of lattice points.
    pub fn len(&self) -> usize {
        self.comps.first().map_or(0, |f| f.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn comps(&self) -> &[Field] {
        &self.comps
    }

    pub fn into_comps(self) -> Vec<Field> {
        self.comps
    }

    pub fn flat(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.rank());
        idx.iter().fold(0, |acc, &i| acc * self.n + i)
    }

    pub fn unflat(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.rank()];
        for s in (0..self.rank()).rev() {
            idx[s] = flat % self.n;
            flat /= self.n;
        }
        idx
    }

    pub fn comp(&self, idx: &[usize]) -> &Field {
        &self.comps[self.flat(idx)]
    }

    pub fn comp_mut(&mut self, idx: &[usize]) -> &mut Field {
        let f = self.flat(idx);
        &mut self.comps[f]
    }

    pub fn at(&self, p: usize, idx: &[usize]) -> C64 {
        self.comp(idx)[p]
    }

    pub fn max_abs(&self) -> f64 {
        self.comps.iter().flatten().fold(0.0, |m, z| m.max(z.norm()))
    }

    /// Complex conjugate tensor; every slot changes type.
    pub fn conj(&self) -> TensorField {
        Self {
            n: self.n,
            sig: self.sig.iter().map(|s| s.conj()).collect(),
            comps: self.comps.iter().map(|f| f.iter().map(|z| z.conj()).collect()).collect(),
        }
    }

    pub fn sub(&self, other: &TensorField) -> Result<TensorField> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &TensorField) -> Result<TensorField> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn scale(&self, s: C64) -> TensorField {
        Self {
            n: self.n,
            sig: self.sig.clone(),
            comps: self.comps.iter().map(|f| f.iter().map(|z| z * s).collect()).collect(),
        }
    }

    fn zip_with(&self, other: &TensorField, op: impl Fn(C64, C64) -> C64) -> Result<TensorField> {
        if self.sig != other.sig || self.n != other.n {
            return Err(Error::Signature(format!("{:?} vs {:?}", self.sig, other.sig)));
        }
        if self.len() != other.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), got: other.len() });
        }
        let comps = self
            .comps
            .iter()
            .zip(&other.comps)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| op(*x, *y)).collect())
            .collect();
        Ok(Self { n: self.n, sig: self.sig.clone(), comps })
    }

    /// Reorder slots: output slot `s` is input slot `perm[s]`.
    pub fn permute(&self, perm: &[usize]) -> Result<TensorField> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Signature(format!("{perm:?} is not a permutation of {r} slots")));
        }
        let sig: Vec<Slot> = perm.iter().map(|&p| self.sig[p]).collect();
        let mut out = TensorField::zeros(self.n, sig, self.len());
        for f in 0..self.comps.len() {
            let idx = out.unflat(f);
            let mut src = vec![0; r];
            for s in 0..r {
                src[perm[s]] = idx[s];
            }
            out.comps[f] = self.comps[self.flat(&src)].clone();
        }
        Ok(out)
    }
}

/// Connections on `T^{1,0}` built from the Chern connection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connection {
    /// `nabla_i xi^k = d_i xi^k + Gamma^k_{ij} xi^j`, `nabla_ibar = dbar` on `T^{1,0}`.
    Chern,
    /// `nabla^T_i xi^p = nabla_i xi^p - T^p_{ij} xi^j`, `nabla^T_ibar = nabla_ibar`.
    Twisted,
    /// `nabla^Tsharp_i = nabla_i`, `nabla^Tsharp_ibar xi^p = nabla_ibar xi^p + g^{p sbar} T_{ibar sbar j} xi^j`.
    TwistedSharp,
}

/// Christoffel-type tables `[k][m][j]` over the grid.
pub struct ConnectionData<'a> {
    pub n: usize,
    /// `Gamma^k_{mj} = g^{k lbar} d_m g_{j lbar}`.
    pub gamma: &'a [Field],
    /// `K^k_{mbar j} = g^{k sbar} conj(T_{m s jbar})`.
    pub sharp: &'a [Field],
}

impl ConnectionData<'_> {
    /// Coefficient `C^k_{m j}` for a derivative of kind `dir_holo` acting on a slot of kind `slot_holo`;
    /// `None` when it vanishes identically. The flag asks for complex conjugation.
    fn coefficient(
        &self,
        conn: Connection,
        dir_holo: bool,
        slot_holo: bool,
        m: usize,
        k: usize,
        j: usize,
    ) -> Option<(&Field, bool)> {
        let n = self.n;
        let gam = |a: usize, b: usize| &self.gamma[(k * n + a) * n + b];
        let kk = |a: usize, b: usize| &self.sharp[(k * n + a) * n + b];
        match (conn, dir_holo, slot_holo) {
            (Connection::Chern, true, true) => Some((gam(m, j), false)),
            (Connection::Chern, false, false) => Some((gam(m, j), true)),
            (Connection::Twisted, true, true) => Some((gam(j, m), false)),
            (Connection::Twisted, false, false) => Some((gam(j, m), true)),
            (Connection::TwistedSharp, true, true) => Some((gam(m, j), false)),
            (Connection::TwistedSharp, false, false) => Some((gam(m, j), true)),
            (Connection::TwistedSharp, false, true) => Some((kk(m, j), false)),
            (Connection::TwistedSharp, true, false) => Some((kk(m, j), true)),
            _ => None,
        }
    }
}

/// Covariant derivative in the holomorphic (`holo = true`) or antiholomorphic directions.
///
/// The result carries a new leading slot (`Lower` or `LowerBar`) for the direction; slot `s`
/// of the input is differentiated with connection `conns[s]`.
pub fn nabla(
    x: &TensorField,
    conns: &[Connection],
    holo: bool,
    conn: &ConnectionData,
    diff: &Differentiator,
) -> Result<TensorField> {
    let n = x.n();
    if conns.len() != x.rank() {
        return Err(Error::Signature(format!("{} connections for a rank-{} tensor", conns.len(), x.rank())));
    }
    if n != conn.n || n != diff.chart().n() {
        return Err(Error::DimensionMismatch { expected: n, got: conn.n });
    }
    let dirs: Vec<[Dir; 1]> = (0..n).map(|m| [if holo { Dir::Holo(m) } else { Dir::Anti(m) }]).collect();
    let ops: Vec<&[Dir]> = dirs.iter().map(|d| &d[..]).collect();
    let refs: Vec<&[C64]> = x.comps().iter().map(|f| f.as_slice()).collect();
    let derivs = diff.derivatives_many(&refs, &ops)?;

    let mut sig = vec![if holo { Slot::Lower } else { Slot::LowerBar }];
    sig.extend_from_slice(x.sig());
    let len = x.len();
    let ncomp = x.comps().len();
    let mut comps = Vec::with_capacity(n * ncomp);
    for m in 0..n {
        for f in 0..ncomp {
            comps.push(derivs[f][m].clone());
        }
    }
    let mut out = TensorField::new(n, sig, comps)?;

    let mut src = vec![0; x.rank()];
    for m in 0..n {
        for f in 0..ncomp {
            let idx = x.unflat(f);
            let target = m * ncomp + f;
            for (s, &slot) in x.sig().iter().enumerate() {
                let v = idx[s];
                for j in 0..n {
                    // upper slot: + C^v_{mj} X^{..j..}; lower slot: - C^j_{mv} X_{..j..}
                    let (k, jj, sign) = if slot.is_upper() { (v, j, 1.0) } else { (j, v, -1.0) };
                    let Some((coef, conj)) = conn.coefficient(conns[s], holo, slot.is_holo(), m, k, jj) else {
                        continue;
                    };
                    src.copy_from_slice(&idx);
                    src[s] = j;
                    let xs = x.comp(&src);
                    let o = &mut out.comps[target];
                    for p in 0..len {
                        let cf = if conj { coef[p].conj() } else { coef[p] };
                        o[p] += cf * xs[p] * sign;
                    }
                }
            }
        }
    }
    Ok(out)
}
