use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::complex::{pauli_x, pauli_y, pauli_z, ComplexMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Depolarize,
    Bitflip,
}

/// Local single-qubit noise applied independently to every qubit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseChannel {
    pub kind: NoiseKind,
    pub strength: f64,
}

impl NoiseChannel {
    /// `(1-p)ρ + p/3 (XρX + YρY + ZρZ)`.
    pub fn depolarize(p: f64) -> Self {
        Self {
            kind: NoiseKind::Depolarize,
            strength: p,
        }
    }

    /// `(1-p)ρ + p XρX`.
    pub fn bitflip(p: f64) -> Self {
        Self {
            kind: NoiseKind::Bitflip,
            strength: p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.strength) || self.strength.is_nan() {
            return Err(Error::Validation(format!(
                "noise strength {} outside [0, 1]",
                self.strength
            )));
        }
        Ok(())
    }

    /// Kraus-style weights and Pauli conjugations making up the channel,
    /// identity term excluded.
    fn pauli_terms(&self) -> Vec<(f64, ComplexMatrix)> {
        let p = self.strength;
        match self.kind {
            NoiseKind::Depolarize => vec![
                (p / 3.0, pauli_x()),
                (p / 3.0, pauli_y()),
                (p / 3.0, pauli_z()),
            ],
            NoiseKind::Bitflip => vec![(p, pauli_x())],
        }
    }

    /// Applies the channel to a single-qubit operator.
    pub fn apply_single(&self, op: &ComplexMatrix) -> Result<ComplexMatrix> {
        self.validate()?;
        let mut out = op.scale(1.0 - self.strength);
        for (w, pauli) in self.pauli_terms() {
            out = out.add(&op.conjugate_by(&pauli)?.scale(w));
        }
        Ok(out)
    }

    /// Heisenberg-picture map. Both channels are mixtures of Hermitian
    /// Pauli conjugations, so the adjoint coincides with the channel.
    pub fn apply_adjoint_single(&self, op: &ComplexMatrix) -> Result<ComplexMatrix> {
        self.apply_single(op)
    }

    /// Applies the channel to qubit `k` (0 = most significant) of an
    /// `n`-qubit operator.
    pub fn apply_to_qubit(&self, rho: &ComplexMatrix, n: usize, k: usize) -> Result<ComplexMatrix> {
        self.validate()?;
        let mut out = rho.scale(1.0 - self.strength);
        for (w, pauli) in self.pauli_terms() {
            let conj = conjugate_qubit(rho, n, k, &pauli);
            out = out.add(&conj.scale(w));
        }
        Ok(out)
    }
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseKind::Depolarize => "depolarize",
            NoiseKind::Bitflip => "bitflip",
        })
    }
}

impl std::fmt::Display for NoiseChannel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.kind, self.strength)
    }
}

impl std::str::FromStr for NoiseChannel {
    type Err = Error;

    /// Parses `depolarize:0.2` or `bitflip:0.1`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, p) = s.split_once(':').ok_or_else(|| {
            Error::Validation(format!("noise must look like kind:strength, got '{s}'"))
        })?;
        let p: f64 = p
            .parse()
            .map_err(|_| Error::Validation(format!("bad noise strength '{p}'")))?;
        let ch = match kind {
            "depolarize" | "dp" => Self::depolarize(p),
            "bitflip" | "bf" => Self::bitflip(p),
            other => return Err(Error::Validation(format!("unknown noise kind '{other}'"))),
        };
        ch.validate()?;
        Ok(ch)
    }
}

/// `U_k ρ U_k†` where `U_k` acts as `u` on qubit `k` only.
pub(crate) fn conjugate_qubit(
    rho: &ComplexMatrix,
    n: usize,
    k: usize,
    u: &ComplexMatrix,
) -> ComplexMatrix {
    let dim = 1usize << n;
    let bit = 1usize << (n - 1 - k);
    let mut left = ComplexMatrix::zeros(dim, dim);
    for r in 0..dim {
        let rk = usize::from(r & bit != 0);
        let r0 = r & !bit;
        for s in 0..2 {
            let w = u.get(rk, s);
            if w.norm_sqr() == 0.0 {
                continue;
            }
            let src = r0 | (s * bit);
            for c in 0..dim {
                let v = left.get(r, c) + w * rho.get(src, c);
                left.set(r, c, v);
            }
        }
    }
    let mut out = ComplexMatrix::zeros(dim, dim);
    for c in 0..dim {
        let ck = usize::from(c & bit != 0);
        let c0 = c & !bit;
        for s in 0..2 {
            let w = u.get(ck, s).conj();
            if w.norm_sqr() == 0.0 {
                continue;
            }
            let src = c0 | (s * bit);
            for r in 0..dim {
                let v = out.get(r, c) + left.get(r, src) * w;
                out.set(r, c, v);
            }
        }
    }
    out
}
