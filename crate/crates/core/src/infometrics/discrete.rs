use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for distribution validity and exact independence checks.
pub const TOL: f64 = 1e-12;
/// Tolerance for the conclusion `I(S;S') = H(S) = H(S')`.
pub const CONCLUSION_TOL: f64 = 1e-9;
/// Largest supported support size per variable.
pub const MAX_SUPPORT: usize = 64;

fn check_distribution(p: &[f64]) -> Result<()> {
    if let Some(i) = p.iter().position(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid(format!("probability {i} is negative or non-finite: {}", p[i])));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > TOL {
        return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
    }
    Ok(())
}

fn plogp_sum(p: impl Iterator<Item = f64>) -> f64 {
    -p.filter(|&v| v > 0.0).map(|v| v * v.log2()).sum::<f64>()
}

/// Shannon entropy in bits.
pub fn entropy_discrete(p: &[f64]) -> Result<f64> {
    check_distribution(p)?;
    Ok(plogp_sum(p.iter().copied()))
}

/// Joint distribution `p(a, b)` as a row-major table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct DiscreteJoint {
    rows: usize,
    cols: usize,
    p: Vec<f64>,
}

impl TryFrom<Vec<Vec<f64>>> for DiscreteJoint {
    type Error = Error;

    fn try_from(table: Vec<Vec<f64>>) -> Result<Self> {
        DiscreteJoint::new(table)
    }
}

impl From<DiscreteJoint> for Vec<Vec<f64>> {
    fn from(j: DiscreteJoint) -> Self {
        j.p.chunks(j.cols).map(<[f64]>::to_vec).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Given {
    /// Condition on the row variable: `H(col | row)`.
    Rows,
    /// Condition on the column variable: `H(row | col)`.
    Cols,
}

impl DiscreteJoint {
    pub fn new(table: Vec<Vec<f64>>) -> Result<Self> {
        let rows = table.len();
        let cols = table.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 || table.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("joint table must be a non-empty rectangle"));
        }
        if rows > MAX_SUPPORT || cols > MAX_SUPPORT {
            return Err(Error::invalid(format!("support sizes are capped at {MAX_SUPPORT}")));
        }
        let p: Vec<f64> = table.into_iter().flatten().collect();
        check_distribution(&p)?;
        Ok(Self { rows, cols, p })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.p[a * self.cols + b]
    }

    pub fn row_marginal(&self) -> Vec<f64> {
        self.p.chunks(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_marginal(&self) -> Vec<f64> {
        (0..self.cols)
            .map(|b| (0..self.rows).map(|a| self.get(a, b)).sum())
            .collect()
    }

    pub fn joint_entropy(&self) -> f64 {
        plogp_sum(self.p.iter().copied())
    }

    /// Whether `p(a, b) = p(a) p(b)` in every cell, to [`TOL`].
    pub fn factorizes(&self) -> bool {
        let (pa, pb) = (self.row_marginal(), self.col_marginal());
        (0..self.rows).all(|a| (0..self.cols).all(|b| (self.get(a, b) - pa[a] * pb[b]).abs() <= TOL))
    }
}

/// `I(A;B) = sum p log2(p / (p_a p_b))` in bits.
pub fn mutual_information_discrete(j: &DiscreteJoint) -> f64 {
    let (pa, pb) = (j.row_marginal(), j.col_marginal());
    let mut total = 0.0;
    for a in 0..j.rows {
        for b in 0..j.cols {
            let p = j.get(a, b);
            if p > 0.0 {
                total += p * (p / (pa[a] * pb[b])).log2();
            }
        }
    }
    total.max(0.0)
}

/// `H(A|B) = H(A,B) - H(B)`.
pub fn conditional_entropy(j: &DiscreteJoint, given: Given) -> f64 {
    let marginal = match given {
        Given::Rows => j.row_marginal(),
        Given::Cols => j.col_marginal(),
    };
    (j.joint_entropy() - plogp_sum(marginal.into_iter())).max(0.0)
}

/// Mutual information of a joint given as weighted `(a, b)` outcome pairs with arbitrary labels.
pub fn mutual_information_pairs<A: Ord + Clone, B: Ord + Clone>(pairs: &[(A, B, f64)]) -> f64 {
    let mut pa: BTreeMap<A, f64> = BTreeMap::new();
    let mut pb: BTreeMap<B, f64> = BTreeMap::new();
    let mut pab: BTreeMap<(A, B), f64> = BTreeMap::new();
    for (a, b, p) in pairs {
        *pa.entry(a.clone()).or_default() += p;
        *pb.entry(b.clone()).or_default() += p;
        *pab.entry((a.clone(), b.clone())).or_default() += p;
    }
    let mut total = 0.0;
    for ((a, b), p) in &pab {
        if *p > 0.0 {
            total += p * (p / (pa[a] * pb[b])).log2();
        }
    }
    total.max(0.0)
}

/// A finite system `S, T -> X = f(S, T) -> S' = E(X)`, `X^ = D(S', T)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteSystem {
    /// `p(s, t)`, rows indexed by `s`.
    pub joint: DiscreteJoint,
    /// `mixing[s][t] = x`.
    pub mixing: Vec<Vec<usize>>,
    /// `encoder[x] = s'`.
    pub encoder: BTreeMap<usize, usize>,
    /// `decoder[s'][t] = x^`.
    pub decoder: BTreeMap<usize, BTreeMap<usize, usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpiCheck {
    /// `I(X; X^)` in bits.
    pub i_x_xhat: f64,
    /// `I(X; (S', T))` in bits.
    pub i_x_code_condition: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub premise_reconstruction: bool,
    /// First cell where `D(E(f(s,t)), t) != f(s,t)`, as `(s, t)`.
    pub reconstruction_failure: Option<(usize, usize)>,
    pub premise_independence: bool,
    /// Bits.
    pub i_s_code: f64,
    pub h_s: f64,
    pub h_code: f64,
    pub h_s_given_code: f64,
    pub i_code_t: f64,
    pub dpi: DpiCheck,
    /// `I(S;S') = H(S) = H(S')`; absent when a premise fails.
    pub conclusion_holds: Option<bool>,
}

impl DiscreteSystem {
    fn positive_cells(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let (rs, ct) = self.joint.shape();
        (0..rs).flat_map(move |s| (0..ct).map(move |t| (s, t, self.joint.get(s, t)))).filter(|c| c.2 > 0.0)
    }

    /// Checks table shapes, injectivity of `f` on the support, and totality of
    /// `E` and `D` on reachable inputs, naming the first violated cell.
    pub fn validate(&self) -> Result<()> {
        let (rs, ct) = self.joint.shape();
        if self.mixing.len() != rs || self.mixing.iter().any(|r| r.len() != ct) {
            return Err(Error::invalid(format!("mixing table must be {rs}x{ct} like the joint")));
        }
        let mut seen: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for (s, t, _) in self.positive_cells() {
            let x = self.mixing[s][t];
            if let Some(&(s0, t0)) = seen.get(&x) {
                return Err(Error::invalid(format!(
                    "mixing[{s}][{t}] = {x} repeats mixing[{s0}][{t0}]; f must be injective on the support"
                )));
            }
            seen.insert(x, (s, t));
            let code = *self
                .encoder
                .get(&x)
                .ok_or_else(|| Error::invalid(format!("encoder[{x}] is missing (reached from s={s}, t={t})")))?;
            if code >= MAX_SUPPORT {
                return Err(Error::invalid(format!("encoder[{x}] = {code} exceeds the support cap")));
            }
            self.decoder
                .get(&code)
                .and_then(|row| row.get(&t))
                .ok_or_else(|| Error::invalid(format!("decoder[{code}][{t}] is missing (reached from s={s})")))?;
        }
        Ok(())
    }

    /// Exact check of the identifiability argument on this system.
    ///
    /// Premises and conclusion are reported separately; the conclusion is
    /// computed only when both premises hold and is never inferred from them.
    pub fn lemma_check(&self) -> Result<LemmaReport> {
        self.validate()?;
        let (rs, ct) = self.joint.shape();
        let code_of = |s: usize, t: usize| self.encoder[&self.mixing[s][t]];
        let n_code = self.positive_cells().map(|(s, t, _)| code_of(s, t)).max().unwrap_or(0) + 1;

        let mut reconstruction_failure = None;
        let mut s_code = vec![vec![0.0; n_code]; rs];
        let mut code_t = vec![vec![0.0; ct]; n_code];
        let mut x_xhat = Vec::new();
        let mut x_code_t = Vec::new();
        for (s, t, p) in self.positive_cells() {
            let x = self.mixing[s][t];
            let c = code_of(s, t);
            let xhat = self.decoder[&c][&t];
            if xhat != x && reconstruction_failure.is_none() {
                reconstruction_failure = Some((s, t));
            }
            s_code[s][c] += p;
            code_t[c][t] += p;
            x_xhat.push((x, xhat, p));
            x_code_t.push((x, (c, t), p));
        }
        let s_code = DiscreteJoint::new(s_code)?;
        let code_t = DiscreteJoint::new(code_t)?;

        let h_s = entropy_discrete(&s_code.row_marginal())?;
        let h_code = entropy_discrete(&s_code.col_marginal())?;
        let i_s_code = mutual_information_discrete(&s_code);
        let premise_reconstruction = reconstruction_failure.is_none();
        let premise_independence = code_t.factorizes();
        let i_x_xhat = mutual_information_pairs(&x_xhat);
        let i_x_code_condition = mutual_information_pairs(&x_code_t);
        let conclusion_holds = (premise_reconstruction && premise_independence)
            .then(|| (i_s_code - h_s).abs() <= CONCLUSION_TOL && (h_s - h_code).abs() <= CONCLUSION_TOL);
        Ok(LemmaReport {
            premise_reconstruction,
            reconstruction_failure,
            premise_independence,
            i_s_code,
            h_s,
            h_code,
            h_s_given_code: conditional_entropy(&s_code, Given::Cols),
            i_code_t: mutual_information_discrete(&code_t),
            dpi: DpiCheck {
                i_x_xhat,
                i_x_code_condition,
                holds: i_x_xhat <= i_x_code_condition + TOL,
            },
            conclusion_holds,
        })
    }

    /// Two uniform bits, identity pairing `x = 2s + t`, encoder `x -> s`.
    pub fn projection() -> Self {
        Self::two_bits(|s, _| s, |c, t| 2 * c + t)
    }

    /// Two uniform bits with encoder `x -> s xor t` and decoder `(c, t) -> (c xor t, t)`.
    pub fn xor() -> Self {
        Self::two_bits(|s, t| s ^ t, |c, t| 2 * (c ^ t) + t)
    }

    /// Two uniform bits with a constant encoder.
    pub fn constant_encoder() -> Self {
        Self::two_bits(|_, _| 0, |_, t| t)
    }

    fn two_bits(enc: impl Fn(usize, usize) -> usize, dec: impl Fn(usize, usize) -> usize) -> Self {
        let mut encoder = BTreeMap::new();
        let mut decoder: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
        for s in 0..2 {
            for t in 0..2 {
                let c = enc(s, t);
                encoder.insert(2 * s + t, c);
                decoder.entry(c).or_default().insert(t, dec(c, t));
            }
        }
        Self {
            joint: DiscreteJoint::new(vec![vec![0.25, 0.25], vec![0.25, 0.25]]).unwrap(),
            mixing: vec![vec![0, 1], vec![2, 3]],
            encoder,
            decoder,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn joint(t: &[&[f64]]) -> DiscreteJoint {
        DiscreteJoint::new(t.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn entropy_values() {
        assert_eq!(entropy_discrete(&[0.5, 0.5]).unwrap(), 1.0);
        assert_eq!(entropy_discrete(&[1.0]).unwrap(), 0.0);
        // -(3/4) log2(3/4) - (1/4) log2(1/4) = 2 - (3/4) log2 3.
        let expected = 2.0 - 0.75 * 3f64.log2();
        assert!((entropy_discrete(&[0.75, 0.25]).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.811278).abs() < 1e-6);
        assert!(entropy_discrete(&[0.6, 0.6]).is_err());
        assert!(entropy_discrete(&[1.5, -0.5]).is_err());
    }

    #[test]
    fn mutual_information_values() {
        assert_eq!(mutual_information_discrete(&joint(&[&[0.25, 0.25], &[0.25, 0.25]])), 0.0);
        assert!((mutual_information_discrete(&joint(&[&[0.5, 0.0], &[0.0, 0.5]])) - 1.0).abs() < 1e-15);
        // 2 * 0.4 log2(1.6) + 2 * 0.1 log2(0.4).
        let expected = 0.8 * 1.6f64.log2() + 0.2 * 0.4f64.log2();
        let got = mutual_information_discrete(&joint(&[&[0.4, 0.1], &[0.1, 0.4]]));
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.278).abs() < 1e-3);
    }

    #[test]
    fn projection_system_recovers_source() {
        let r = DiscreteSystem::projection().lemma_check().unwrap();
        assert!(r.premise_reconstruction && r.premise_independence);
        assert_eq!(r.conclusion_holds, Some(true));
        assert!((r.i_s_code - 1.0).abs() < 1e-9 && (r.h_s - 1.0).abs() < 1e-9 && (r.h_code - 1.0).abs() < 1e-9);
        assert!(r.dpi.holds);
    }

    #[test]
    fn xor_system_meets_premises_but_not_conclusion() {
        let r = DiscreteSystem::xor().lemma_check().unwrap();
        assert!(r.premise_reconstruction);
        assert!(r.premise_independence);
        assert!(r.i_s_code.abs() < 1e-12);
        assert_eq!(r.h_s, 1.0);
        assert_eq!(r.conclusion_holds, Some(false));
    }

    #[test]
    fn constant_encoder_fails_reconstruction() {
        let r = DiscreteSystem::constant_encoder().lemma_check().unwrap();
        assert!(!r.premise_reconstruction);
        assert!(r.reconstruction_failure.is_some());
        assert_eq!(r.conclusion_holds, None);
    }

    #[test]
    fn invalid_tables_name_the_cell() {
        let mut sys = DiscreteSystem::projection();
        sys.encoder.remove(&3);
        let err = sys.lemma_check().unwrap_err().to_string();
        assert!(err.contains("encoder[3]"), "{err}");
        let mut sys = DiscreteSystem::projection();
        sys.mixing[1][1] = 0;
        let err = sys.lemma_check().unwrap_err().to_string();
        assert!(err.contains("mixing[1][1]"), "{err}");
    }

    #[test]
    fn system_json_round_trip() {
        let sys = DiscreteSystem::xor();
        let text = serde_json::to_string(&sys).unwrap();
        assert_eq!(serde_json::from_str::<DiscreteSystem>(&text).unwrap(), sys);
        assert!(serde_json::from_str::<DiscreteSystem>(&text.replace("0.25", "0.3")).is_err());
    }

    fn random_joint() -> impl Strategy<Value = DiscreteJoint> {
        (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
            proptest::collection::vec(0.0f64..1.0, r * c).prop_filter_map("zero mass", move |w| {
                let total: f64 = w.iter().sum();
                (total > 1e-3).then(|| {
                    let mut p: Vec<f64> = w.iter().map(|v| v / total).collect();
                    // Absorb rounding so the table sums to one within tolerance.
                    let fix = 1.0 - p.iter().sum::<f64>();
                    p[0] = (p[0] + fix).max(0.0);
                    DiscreteJoint::new(p.chunks(c).map(<[f64]>::to_vec).collect()).unwrap()
                })
            })
        })
    }

    proptest! {
        #[test]
        fn information_identities(j in random_joint()) {
            let ha = entropy_discrete(&j.row_marginal()).unwrap_or_else(|_| plogp_sum(j.row_marginal().into_iter()));
            let hb = plogp_sum(j.col_marginal().into_iter());
            let i = mutual_information_discrete(&j);
            prop_assert!((i - (ha + hb - j.joint_entropy())).abs() < 1e-12);
            prop_assert!(i >= 0.0 && i <= ha.min(hb) + 1e-12);
            prop_assert!(conditional_entropy(&j, Given::Cols) >= 0.0);
            prop_assert!(conditional_entropy(&j, Given::Rows) >= 0.0);
        }

        #[test]
        fn data_processing_inequality_on_random_tables(
            j in random_joint(),
            enc in proptest::collection::vec(0usize..4, 36),
            dec in proptest::collection::vec(0usize..40, 24),
        ) {
            let (rs, ct) = j.shape();
            let mixing: Vec<Vec<usize>> = (0..rs).map(|s| (0..ct).map(|t| s * ct + t).collect()).collect();
            let encoder: BTreeMap<usize, usize> = (0..rs * ct).map(|x| (x, enc[x])).collect();
            let mut decoder: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
            for c in 0..4 {
                for t in 0..ct {
                    decoder.entry(c).or_default().insert(t, dec[c * 6 + t]);
                }
            }
            let sys = DiscreteSystem { joint: j, mixing, encoder, decoder };
            let r = sys.lemma_check().unwrap();
            prop_assert!(r.dpi.holds);
        }

        #[test]
        fn exact_recovery_always_satisfies_conclusion(j in random_joint()) {
            // Exact recovery needs S' independent of T, so use a product joint.
            let (pa, pb) = (j.row_marginal(), j.col_marginal());
            let table: Vec<Vec<f64>> = pa.iter().map(|a| pb.iter().map(|b| a * b).collect()).collect();
            let Ok(joint) = DiscreteJoint::new(table) else { return Ok(()) };
            let (rs, ct) = joint.shape();
            let mixing: Vec<Vec<usize>> = (0..rs).map(|s| (0..ct).map(|t| s * ct + t).collect()).collect();
            let encoder: BTreeMap<usize, usize> = (0..rs * ct).map(|x| (x, x / ct)).collect();
            let mut decoder: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
            for s in 0..rs {
                for t in 0..ct {
                    decoder.entry(s).or_default().insert(t, s * ct + t);
                }
            }
            let r = DiscreteSystem { joint, mixing, encoder, decoder }.lemma_check().unwrap();
            prop_assert_eq!(r.conclusion_holds, Some(true));
        }
    }
}
