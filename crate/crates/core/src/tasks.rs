//! Binary arithmetic task data: exact oracles, token encodings, exhaustive
//! sample sets, validation splits and the input/output discontinuity table.

use crate::error::{ArithError, Result};
use crate::rng::RngState;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;

pub type Token = u8;

/// Fixed five-token vocabulary.
pub mod vocab {
    use super::Token;
    pub const UNUSED: Token = 0;
    pub const START: Token = 1;
    pub const OP: Token = 2;
    pub const ZERO: Token = 3;
    pub const ONE: Token = 4;
    pub const SIZE: usize = 5;

    pub fn bit(b: bool) -> Token {
        if b {
            ONE
        } else {
            ZERO
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operation {
    Add,
    Mul,
}

impl Operation {
    pub fn symbol(self) -> char {
        match self {
            Operation::Add => '+',
            Operation::Mul => '*',
        }
    }
}

/// Bit order of a token field. `Reverse` is little-endian (LSB first).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DigitOrder {
    Reverse,
    Plain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub operation: Operation,
    pub operand_bits: u32,
    pub input_order: DigitOrder,
    pub output_order: DigitOrder,
}

impl TaskSpec {
    pub fn new(operation: Operation, operand_bits: u32) -> Self {
        Self {
            operation,
            operand_bits,
            input_order: DigitOrder::Reverse,
            output_order: DigitOrder::Reverse,
        }
    }

    pub fn addition() -> Self {
        Self::new(Operation::Add, 7)
    }

    pub fn multiplication() -> Self {
        Self::new(Operation::Mul, 7)
    }

    pub fn with_order(mut self, input: DigitOrder, output: DigitOrder) -> Self {
        self.input_order = input;
        self.output_order = output;
        self
    }

    pub fn output_length(&self) -> usize {
        let n = self.operand_bits as usize;
        match self.operation {
            Operation::Add => n + 1,
            Operation::Mul => 2 * n,
        }
    }

    pub fn prompt_length(&self) -> usize {
        2 * self.operand_bits as usize + 1
    }

    pub fn operand_limit(&self) -> u64 {
        1 << self.operand_bits
    }

    pub fn pair_count(&self) -> usize {
        1 << (2 * self.operand_bits)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=16).contains(&self.operand_bits) {
            return Err(ArithError::Config(format!(
                "operand_bits must be in 1..=16, got {}",
                self.operand_bits
            )));
        }
        Ok(())
    }

    pub fn apply(&self, a: u64, b: u64) -> u64 {
        match self.operation {
            Operation::Add => a + b,
            Operation::Mul => a * b,
        }
    }

    pub fn prompt(&self, a: u64, b: u64) -> Result<Vec<Token>> {
        let mut p = encode_operand(a, self.operand_bits, self.input_order)?;
        p.push(vocab::OP);
        p.extend(encode_operand(b, self.operand_bits, self.input_order)?);
        Ok(p)
    }

    pub fn completion_for(&self, value: u64) -> Vec<Token> {
        let mut bits: Vec<Token> = (0..self.output_length())
            .map(|i| vocab::bit(value >> i & 1 == 1))
            .collect();
        if self.output_order == DigitOrder::Plain {
            bits.reverse();
        }
        bits
    }

    /// Decodes a completion; non-bit tokens count as zero bits and are
    /// reported through the boolean.
    pub fn decode_completion(&self, tokens: &[Token]) -> (u64, bool) {
        let mut malformed = false;
        let mut value = 0u64;
        let n = tokens.len();
        for (pos, &t) in tokens.iter().enumerate() {
            let significance = match self.output_order {
                DigitOrder::Reverse => pos,
                DigitOrder::Plain => n - 1 - pos,
            };
            match t {
                vocab::ONE => value |= 1 << significance,
                vocab::ZERO => {}
                _ => malformed = true,
            }
        }
        (value, malformed)
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}{}bit(in:{:?},out:{:?})",
            self.operation.symbol(),
            self.operand_bits,
            self.input_order,
            self.output_order
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub a: u64,
    pub b: u64,
    pub prompt: Vec<Token>,
    pub completion: Vec<Token>,
    pub result: u64,
    /// Completion is random rather than `a op b`.
    pub synthetic: bool,
}

fn check_operand(x: u64, bits: u32) -> Result<()> {
    let limit = 1u64 << bits;
    if x >= limit {
        return Err(ArithError::Domain { value: x, limit });
    }
    Ok(())
}

/// Full adder over LSB-first bit vectors, driven by the two-output
/// three-input truth table. The result has one more bit than the longer input.
pub fn ripple_add(x: &[bool], y: &[bool]) -> Vec<bool> {
    // (a, b, carry_in) -> (sum, carry_out)
    const TABLE: [(bool, bool); 8] = [
        (false, false),
        (true, false),
        (true, false),
        (false, true),
        (true, false),
        (false, true),
        (false, true),
        (true, true),
    ];
    let n = x.len().max(y.len());
    let mut out = Vec::with_capacity(n + 1);
    let mut carry = false;
    for i in 0..n {
        let a = x.get(i).copied().unwrap_or(false);
        let b = y.get(i).copied().unwrap_or(false);
        let (s, c) = TABLE[(a as usize) << 2 | (b as usize) << 1 | carry as usize];
        out.push(s);
        carry = c;
    }
    out.push(carry);
    out
}

fn to_bits(x: u64, width: usize) -> Vec<bool> {
    (0..width).map(|i| x >> i & 1 == 1).collect()
}

fn from_bits(bits: &[bool]) -> u64 {
    bits.iter().enumerate().fold(0, |acc, (i, &b)| acc | (b as u64) << i)
}

/// Bitwise addition of two `bits`-wide operands; returns LSB-first result
/// bits (`bits + 1` of them) and the integer value.
pub fn oracle_add_bits(a: u64, b: u64, bits: u32) -> Result<(Vec<bool>, u64)> {
    check_operand(a, bits)?;
    check_operand(b, bits)?;
    let sum = ripple_add(&to_bits(a, bits as usize), &to_bits(b, bits as usize));
    let value = from_bits(&sum);
    Ok((sum, value))
}

/// Shift-and-add multiplication built on [`ripple_add`]; returns `2·bits`
/// LSB-first result bits and the integer value.
pub fn oracle_mul_bits(a: u64, b: u64, bits: u32) -> Result<(Vec<bool>, u64)> {
    check_operand(a, bits)?;
    check_operand(b, bits)?;
    let width = 2 * bits as usize;
    let a_bits = to_bits(a, bits as usize);
    let mut acc = vec![false; width];
    for (i, b_i) in to_bits(b, bits as usize).into_iter().enumerate() {
        if !b_i {
            continue;
        }
        let mut partial = vec![false; i];
        partial.extend_from_slice(&a_bits);
        acc = ripple_add(&acc, &partial);
        acc.truncate(width);
    }
    let value = from_bits(&acc);
    Ok((acc, value))
}

pub fn oracle_add(a: u64, b: u64) -> Result<(Vec<bool>, u64)> {
    oracle_add_bits(a, b, 7)
}

pub fn oracle_mul(a: u64, b: u64) -> Result<(Vec<bool>, u64)> {
    oracle_mul_bits(a, b, 7)
}

pub fn encode_operand(x: u64, bits: u32, order: DigitOrder) -> Result<Vec<Token>> {
    check_operand(x, bits)?;
    let mut t: Vec<Token> = (0..bits).map(|i| vocab::bit(x >> i & 1 == 1)).collect();
    if order == DigitOrder::Plain {
        t.reverse();
    }
    Ok(t)
}

pub fn decode_operand(tokens: &[Token], order: DigitOrder) -> Result<u64> {
    let n = tokens.len();
    let mut value = 0;
    for (pos, &t) in tokens.iter().enumerate() {
        let sig = match order {
            DigitOrder::Reverse => pos,
            DigitOrder::Plain => n - 1 - pos,
        };
        match t {
            vocab::ONE => value |= 1 << sig,
            vocab::ZERO => {}
            other => {
                return Err(ArithError::Index {
                    what: "bit token",
                    index: other as usize,
                    limit: vocab::SIZE,
                })
            }
        }
    }
    Ok(value)
}

pub fn render_tokens(tokens: &[Token], op: Operation) -> String {
    tokens
        .iter()
        .map(|&t| match t {
            vocab::ZERO => '0',
            vocab::ONE => '1',
            vocab::OP => op.symbol(),
            vocab::START => '^',
            _ => '?',
        })
        .collect()
}

/// Parses a string of `0`/`1` characters (and the operator) into tokens.
pub fn parse_tokens(s: &str) -> Result<Vec<Token>> {
    s.chars()
        .map(|c| match c {
            '0' => Ok(vocab::ZERO),
            '1' => Ok(vocab::ONE),
            '+' | '*' | 'x' | '×' => Ok(vocab::OP),
            '^' => Ok(vocab::START),
            _ => Err(ArithError::Format(format!("unexpected token character {c:?}"))),
        })
        .collect()
}

pub fn make_sample(task: &TaskSpec, a: u64, b: u64) -> Result<Sample> {
    let bits = task.operand_bits;
    let (_, value) = match task.operation {
        Operation::Add => oracle_add_bits(a, b, bits)?,
        Operation::Mul => oracle_mul_bits(a, b, bits)?,
    };
    Ok(Sample {
        id: (a << bits | b) as usize,
        a,
        b,
        prompt: task.prompt(a, b)?,
        completion: task.completion_for(value),
        result: value,
        synthetic: false,
    })
}

/// Every `(A, B)` pair in lexicographic order; sample id is `A·2^bits + B`.
pub fn generate_all(task: &TaskSpec) -> Result<Vec<Sample>> {
    task.validate()?;
    let limit = task.operand_limit();
    let mut out = Vec::with_capacity(task.pair_count());
    for a in 0..limit {
        for b in 0..limit {
            out.push(make_sample(task, a, b)?);
        }
    }
    Ok(out)
}

/// Addition prompts paired with uniformly random completions of the
/// addition output length.
pub fn random_output_dataset(task: &TaskSpec, seed: u64) -> Result<Vec<Sample>> {
    let mut samples = generate_all(task)?;
    let mut rng = RngState::new(seed).fork(0x5EED_0u64);
    for s in &mut samples {
        s.completion = (0..task.output_length()).map(|_| vocab::bit(rng.bit())).collect();
        s.result = task.decode_completion(&s.completion).0;
        s.synthetic = true;
    }
    Ok(samples)
}

pub fn hamming(a: &[Token], b: &[Token]) -> Result<usize> {
    if a.len() != b.len() {
        return Err(ArithError::Contract(format!(
            "hamming needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x != y).count())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Random,
    VsT,
    VsV,
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitKind::Random => "random",
            SplitKind::VsT => "vs_t",
            SplitKind::VsV => "vs_v",
        })
    }
}

impl std::str::FromStr for SplitKind {
    type Err = ArithError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SplitKind::Random),
            "vs_t" | "vst" => Ok(SplitKind::VsT),
            "vs_v" | "vsv" => Ok(SplitKind::VsV),
            _ => Err(ArithError::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// A train/validation partition of sample ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub name: SplitKind,
    pub seed: Option<u64>,
    /// Generating parameters recorded for manifests (centroid, square bounds).
    pub params: serde_json::Value,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl SplitSpec {
    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }
}

/// Seeded permutation; the first three quarters train, the rest validate.
pub fn random_split(n: usize, seed: u64) -> SplitSpec {
    let perm = RngState::new(seed).fork(0x5911_7).permutation(n);
    let n_train = n - n / 4;
    SplitSpec {
        name: SplitKind::Random,
        seed: Some(seed),
        params: serde_json::json!({ "n": n, "train_fraction": 0.75 }),
        train: perm[..n_train].to_vec(),
        validation: perm[n_train..].to_vec(),
    }
}

/// Centroid prompt tokens `1010…⟨op⟩0101…` written directly in token order.
pub fn vs_t_centroid(task: &TaskSpec) -> Vec<Token> {
    let n = task.operand_bits as usize;
    let mut p: Vec<Token> = (0..n).map(|i| vocab::bit(i % 2 == 0)).collect();
    p.push(vocab::OP);
    p.extend((0..n).map(|i| vocab::bit(i % 2 == 1)));
    p
}

/// Validation = the quarter of prompts nearest the centroid in Hamming
/// distance, ties at the boundary radius broken by sample id.
pub fn split_vs_t(task: &TaskSpec, samples: &[Sample]) -> Result<SplitSpec> {
    let centroid = vs_t_centroid(task);
    let mut ranked = samples
        .iter()
        .map(|s| Ok((hamming(&s.prompt, &centroid)?, s.id)))
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_unstable();
    let n_val = samples.len() / 4;
    let radius = ranked.get(n_val.saturating_sub(1)).map_or(0, |r| r.0);
    let n = task.operand_bits as usize;
    let a_star = decode_operand(&centroid[..n], task.input_order)?;
    let b_star = decode_operand(&centroid[n + 1..], task.input_order)?;
    let mut validation: Vec<usize> = ranked[..n_val].iter().map(|r| r.1).collect();
    let mut train: Vec<usize> = ranked[n_val..].iter().map(|r| r.1).collect();
    validation.sort_unstable();
    train.sort_unstable();
    Ok(SplitSpec {
        name: SplitKind::VsT,
        seed: None,
        params: serde_json::json!({
            "centroid": render_tokens(&centroid, task.operation),
            "a_star": a_star,
            "b_star": b_star,
            "boundary_radius": radius,
            "tie_break": "lexicographic (A,B)",
        }),
        train,
        validation,
    })
}

/// Validation = the centred square `[L/4, 3L/4)²` in operand-value space.
pub fn split_vs_v(task: &TaskSpec, samples: &[Sample]) -> SplitSpec {
    let limit = task.operand_limit();
    let (lo, hi) = (limit / 4, 3 * limit / 4);
    let inside = |x: u64| (lo..hi).contains(&x);
    let (validation, train): (Vec<&Sample>, Vec<&Sample>) =
        samples.iter().partition(|s| inside(s.a) && inside(s.b));
    SplitSpec {
        name: SplitKind::VsV,
        seed: None,
        params: serde_json::json!({ "low": lo, "high_exclusive": hi }),
        train: train.into_iter().map(|s| s.id).collect(),
        validation: validation.into_iter().map(|s| s.id).collect(),
    }
}

pub fn make_split(kind: SplitKind, task: &TaskSpec, samples: &[Sample], seed: u64) -> Result<SplitSpec> {
    match kind {
        SplitKind::Random => Ok(random_split(samples.len(), seed)),
        SplitKind::VsT => split_vs_t(task, samples),
        SplitKind::VsV => Ok(split_vs_v(task, samples)),
    }
}

/// One line per sample: `A B op prompt completion`.
pub fn export_dataset<W: Write>(samples: &[Sample], op: Operation, mut w: W) -> Result<()> {
    for s in samples {
        writeln!(
            w,
            "{} {} {} {} {}",
            s.a,
            s.b,
            op.symbol(),
            render_tokens(&s.prompt, op),
            render_tokens(&s.completion, op)
        )?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowMethod {
    Exact,
    Sampled { draws: usize },
}

/// Probability that flipping `k` operand bits changes exactly `j` output bits.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiscontinuityMatrix {
    pub operand_bits: u32,
    /// `rows[k][j]`, `k = 0..=2·bits`, `j = 0..=bits+1`.
    pub rows: Vec<Vec<f64>>,
    pub methods: Vec<RowMethod>,
}

impl DiscontinuityMatrix {
    pub fn cell(&self, k: usize, j: usize) -> f64 {
        self.rows[k][j]
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let cols = self.rows.first().map_or(0, |r| r.len());
        let header: Vec<String> = (0..cols).map(|j| format!("out_{j}")).collect();
        writeln!(w, "flipped,method,{}", header.join(","))?;
        for (k, (row, method)) in self.rows.iter().zip(&self.methods).enumerate() {
            let m = match method {
                RowMethod::Exact => "exact".to_string(),
                RowMethod::Sampled { draws } => format!("sampled:{draws}"),
            };
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(w, "{k},{m},{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Row-count threshold above which masks are sampled instead of enumerated.
pub const EXACT_MASK_LIMIT: u64 = 20_000;
pub const SAMPLED_DRAWS: usize = 100_000;

fn binomial(n: u64, k: u64) -> u64 {
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

/// Addition discontinuity table over every base pair.
pub fn discontinuity_matrix(bits: u32, seed: u64) -> Result<DiscontinuityMatrix> {
    if !(1..=12).contains(&bits) {
        return Err(ArithError::Config(format!("discontinuity bits must be in 1..=12, got {bits}")));
    }
    let width = 2 * bits;
    let limit = 1u64 << bits;
    let low_mask = limit - 1;
    let out_cols = bits as usize + 2;
    let mut by_popcount: Vec<Vec<u64>> = vec![Vec::new(); width as usize + 1];
    let total_masks = 1u64 << width;
    let enumerate_all = (0..=width as u64).all(|k| binomial(width as u64, k) <= EXACT_MASK_LIMIT);
    if enumerate_all {
        for m in 0..total_masks {
            by_popcount[m.count_ones() as usize].push(m);
        }
    }
    let mut rng = RngState::new(seed).fork(0xD15C);
    let mut rows = Vec::with_capacity(width as usize + 1);
    let mut methods = Vec::with_capacity(width as usize + 1);
    for k in 0..=width as usize {
        let masks: Vec<u64>;
        let method;
        if binomial(width as u64, k as u64) <= EXACT_MASK_LIMIT {
            masks = if enumerate_all {
                std::mem::take(&mut by_popcount[k])
            } else {
                (0..total_masks).filter(|m| m.count_ones() as usize == k).collect()
            };
            method = RowMethod::Exact;
        } else {
            masks = (0..SAMPLED_DRAWS)
                .map(|_| {
                    let pos = rng.permutation(width as usize);
                    pos[..k].iter().fold(0u64, |m, &p| m | 1 << p)
                })
                .collect();
            method = RowMethod::Sampled {
                draws: SAMPLED_DRAWS,
            };
        }
        let mut counts = vec![0u64; out_cols];
        for &mask in &masks {
            let (ma, mb) = (mask & low_mask, mask >> bits);
            for a in 0..limit {
                for b in 0..limit {
                    let diff = ((a + b) ^ ((a ^ ma) + (b ^ mb))).count_ones();
                    counts[diff as usize] += 1;
                }
            }
        }
        let total = (masks.len() as u64 * limit * limit) as f64;
        rows.push(counts.iter().map(|&c| c as f64 / total).collect());
        methods.push(method);
    }
    Ok(DiscontinuityMatrix {
        operand_bits: bits,
        rows,
        methods,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<Token> {
        parse_tokens(s).unwrap()
    }

    #[test]
    fn worked_addition_example() {
        let (bits, v) = oracle_add(1, 126).unwrap();
        assert_eq!(v, 127);
        let s = make_sample(&TaskSpec::addition(), 1, 126).unwrap();
        assert_eq!(s.completion, toks("11111110"));
        assert_eq!(bits.len(), 8);
        assert_eq!(oracle_add(0, 0).unwrap().1, 0);
    }

    #[test]
    fn mul_identities() {
        for x in 0..128 {
            assert_eq!(oracle_mul(0, x).unwrap().1, 0);
            assert_eq!(oracle_mul(1, x).unwrap().1, x);
        }
    }

    #[test]
    fn oracles_reject_out_of_range() {
        assert!(matches!(oracle_add(128, 0), Err(ArithError::Domain { .. })));
        assert!(matches!(oracle_mul(0, 200), Err(ArithError::Domain { .. })));
        assert!(encode_operand(128, 7, DigitOrder::Reverse).is_err());
    }

    #[test]
    fn operand_encodings() {
        assert_eq!(encode_operand(1, 7, DigitOrder::Reverse).unwrap(), toks("1000000"));
        assert_eq!(encode_operand(0, 7, DigitOrder::Reverse).unwrap(), toks("0000000"));
        assert_eq!(encode_operand(85, 7, DigitOrder::Reverse).unwrap(), toks("1010101"));
        assert_eq!(encode_operand(1, 7, DigitOrder::Plain).unwrap(), toks("0000001"));
    }

    #[test]
    fn generate_all_shape() {
        let all = generate_all(&TaskSpec::addition()).unwrap();
        assert_eq!(all.len(), 16384);
        assert!(all.iter().all(|s| s.prompt.len() == 15 && s.completion.len() == 8));
        let mul = TaskSpec::multiplication();
        let s = make_sample(&mul, 5, 3).unwrap();
        assert_eq!(mul.decode_completion(&s.completion), (15, false));
        assert_eq!(s.completion.len(), 14);
    }

    #[test]
    fn random_split_partition() {
        let s = random_split(16384, 1);
        assert_eq!((s.train.len(), s.validation.len()), (12288, 4096));
        assert_eq!(s, random_split(16384, 1));
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..16384).collect::<Vec<_>>());
    }

    #[test]
    fn vs_t_radius_and_counts() {
        let task = TaskSpec::addition();
        let all = generate_all(&task).unwrap();
        let split = split_vs_t(&task, &all).unwrap();
        assert_eq!(split.validation.len(), 4096);
        assert_eq!(split.params["a_star"], 85);
        assert_eq!(split.params["b_star"], 42);
        assert_eq!(split.params["boundary_radius"], 6);
        let centroid = vs_t_centroid(&task);
        let dist = |id: usize| hamming(&all[id].prompt, &centroid).unwrap();
        assert!(split.validation.contains(&(85 * 128 + 42)));
        let at6 = split.validation.iter().filter(|&&id| dist(id) == 6).count();
        assert_eq!(at6, 623);
        assert!(split.validation.iter().all(|&id| dist(id) <= 6));
        assert!(split.train.iter().all(|&id| dist(id) >= 6));
    }

    #[test]
    fn vs_v_membership() {
        let task = TaskSpec::addition();
        let all = generate_all(&task).unwrap();
        let split = split_vs_v(&task, &all);
        assert_eq!(split.validation.len(), 4096);
        for (a, b) in [(64, 64), (32, 32), (32, 95), (95, 32), (95, 95)] {
            assert!(split.validation.contains(&(a * 128 + b)));
        }
        assert!(split.train.contains(&0));
        assert!(split.train.contains(&(96 * 128 + 64)));
    }

    #[test]
    fn random_output_control() {
        let task = TaskSpec::addition();
        let a = random_output_dataset(&task, 3).unwrap();
        let b = random_output_dataset(&task, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.completion.len() == 8 && s.synthetic));
        let ones = a.iter().flat_map(|s| &s.completion).filter(|&&t| t == vocab::ONE).count();
        let frac = ones as f64 / (8.0 * a.len() as f64);
        assert!((0.48..=0.52).contains(&frac), "{frac}");
    }

    #[test]
    fn hamming_examples() {
        assert_eq!(hamming(&toks("0101"), &toks("0101")).unwrap(), 0);
        assert_eq!(hamming(&toks("1010101"), &toks("0101010")).unwrap(), 7);
        let task = TaskSpec::addition();
        let p = task.prompt(85, 42).unwrap();
        let q = task.prompt(84, 42).unwrap();
        assert_eq!(hamming(&p, &q).unwrap(), 1);
        assert!(hamming(&p, &p[1..]).is_err());
    }

    #[test]
    fn discontinuity_witness() {
        let task = TaskSpec::addition();
        let x = make_sample(&task, 1, 126).unwrap();
        let y = make_sample(&task, 1, 127).unwrap();
        assert_eq!(hamming(&x.prompt, &y.prompt).unwrap(), 1);
        assert_eq!(hamming(&x.completion, &y.completion).unwrap(), 8);
    }

    #[test]
    fn small_discontinuity_matrix_is_normalised() {
        let m = discontinuity_matrix(3, 0).unwrap();
        assert_eq!(m.cell(0, 0), 1.0);
        for row in &m.rows {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(m.methods.iter().all(|r| *r == RowMethod::Exact));
    }

    #[test]
    fn plain_order_round_trip() {
        let task = TaskSpec::addition().with_order(DigitOrder::Plain, DigitOrder::Plain);
        let s = make_sample(&task, 1, 126).unwrap();
        assert_eq!(s.completion, toks("01111111"));
        assert_eq!(task.decode_completion(&s.completion), (127, false));
    }

    proptest::proptest! {
        #[test]
        fn operand_round_trip(x in 0u64..128, plain in proptest::bool::ANY) {
            let order = if plain { DigitOrder::Plain } else { DigitOrder::Reverse };
            let t = encode_operand(x, 7, order).unwrap();
            proptest::prop_assert_eq!(decode_operand(&t, order).unwrap(), x);
        }
    }
}
