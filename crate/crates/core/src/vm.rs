//! Deterministic contract runtime.
//!
//! Contracts are tables of methods written in a small stack language over
//! `i64` values: literals, wrapping arithmetic, comparisons, bounded loops,
//! a seeded random draw, named state cells and `Return`. Every loop carries
//! a static iteration bound and every invocation is metered against an
//! instruction budget, so execution always terminates. The only entropy is
//! the seed supplied by the caller, which makes results a pure function of
//! `(code, pre-state, method, params, seed)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{Transaction, TxKind, TxPayload};
use crate::encoding::{DecodeError, Reader, Writer};
use crate::rng::SplitMix64;
use crate::Hash256;

/// Maximum instructions executed by one invocation.
pub const INSTRUCTION_BUDGET: u64 = 10_000_000;
/// Largest static bound a single loop may declare.
pub const MAX_LOOP_BOUND: u32 = 10_000_000;
const MAX_STACK: usize = 1024;
const MAX_NESTING: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Instr {
    Push(i64),
    /// Push the n-th invocation parameter.
    Param(u16),
    Load(u16),
    Store(u16),
    /// Pop a value and add it to a state cell.
    AddTo(u16),
    Add,
    Sub,
    Mul,
    /// Euclidean remainder; faults on zero divisor.
    Mod,
    Lt,
    Eq,
    Gt,
    /// Push the next seeded draw as a non-negative 63-bit integer.
    Rand,
    Dup,
    Pop,
    /// Pop an iteration count and run `body` that many times. A count above
    /// `bound` faults; a negative count runs zero iterations.
    Loop { bound: u32, body: Vec<Instr> },
    /// Pop `n` values and finish, returning them in push order.
    Return(u8),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractCode {
    pub methods: BTreeMap<String, Vec<Instr>>,
    pub state_cells: Vec<String>,
    pub disposable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Lifecycle {
    Active,
    Terminated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractInstance {
    pub contract_id: Hash256,
    pub code: ContractCode,
    pub state: Vec<i64>,
    pub lifecycle: Lifecycle,
    pub time_begin: u64,
    pub time_end: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvocationResult {
    pub result_bytes: Vec<u8>,
    pub instructions_executed: u64,
    /// Changed cells as (name, new value).
    pub state_delta: BTreeMap<String, i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BurdenMetrics {
    pub time_occupation: u64,
    pub transaction_numbers: u64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VmError {
    #[error("invalid contract code: {0}")]
    InvalidCode(String),
    #[error("contract has been terminated")]
    ContractTerminated,
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("instruction budget of {0} exceeded")]
    InstructionBudgetExceeded(u64),
    #[error("stack underflow")]
    StackUnderflow,
    #[error("stack overflow")]
    StackOverflow,
    #[error("division by zero")]
    DivisionByZero,
    #[error("loop count {count} above static bound {bound}")]
    LoopBoundExceeded { count: i64, bound: u32 },
    #[error("missing parameter {0}")]
    MissingParam(u16),
    #[error("transaction is not a contract deployment")]
    NotADeployment,
    #[error("transaction is not an invocation")]
    NotAnInvocation,
    #[error("end time {end} precedes begin time {begin}")]
    TimeReversed { begin: u64, end: u64 },
}

impl ContractCode {
    pub fn new(state_cells: &[&str], disposable: bool) -> Self {
        ContractCode {
            methods: BTreeMap::new(),
            state_cells: state_cells.iter().map(|s| s.to_string()).collect(),
            disposable,
        }
    }

    pub fn with_method(mut self, name: &str, body: Vec<Instr>) -> Self {
        self.methods.insert(name.to_string(), body);
        self
    }

    pub fn cell_index(&self, name: &str) -> Option<u16> {
        self.state_cells.iter().position(|c| c == name).map(|i| i as u16)
    }

    /// Static checks: cell references in range, loop bounds within limit,
    /// bounded nesting depth.
    pub fn validate(&self) -> Result<(), VmError> {
        fn walk(code: &ContractCode, body: &[Instr], depth: usize) -> Result<(), VmError> {
            if depth > MAX_NESTING {
                return Err(VmError::InvalidCode(format!("loops nested deeper than {MAX_NESTING}")));
            }
            for ins in body {
                match ins {
                    Instr::Load(c) | Instr::Store(c) | Instr::AddTo(c) if *c as usize >= code.state_cells.len() => {
                        return Err(VmError::InvalidCode(format!("cell index {c} out of range")));
                    }
                    Instr::Loop { bound, body } => {
                        if *bound > MAX_LOOP_BOUND {
                            return Err(VmError::InvalidCode(format!(
                                "loop bound {bound} above {MAX_LOOP_BOUND}"
                            )));
                        }
                        walk(code, body, depth + 1)?;
                    }
                    _ => {}
                }
            }
            Ok(())
        }
        if self.state_cells.len() > u16::MAX as usize {
            return Err(VmError::InvalidCode("too many state cells".into()));
        }
        for (name, body) in &self.methods {
            if name.is_empty() {
                return Err(VmError::InvalidCode("empty method name".into()));
            }
            walk(self, body, 0)?;
        }
        Ok(())
    }

    pub fn encode_into(&self, w: &mut Writer) {
        w.u32(self.methods.len() as u32);
        for (name, body) in &self.methods {
            w.str(name);
            encode_body(body, w);
        }
        w.u32(self.state_cells.len() as u32);
        for c in &self.state_cells {
            w.str(c);
        }
        w.u8(self.disposable as u8);
    }

    pub fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let n = r.u32()? as usize;
        let mut methods = BTreeMap::new();
        for _ in 0..n {
            let name = r.string("method name")?;
            methods.insert(name, decode_body(r, 0)?);
        }
        let cells = r.u32()? as usize;
        if cells > r.remaining() {
            return Err(DecodeError::BadLength(cells));
        }
        let mut state_cells = Vec::with_capacity(cells);
        for _ in 0..cells {
            state_cells.push(r.string("cell name")?);
        }
        let disposable = match r.u8()? {
            0 => false,
            1 => true,
            tag => return Err(DecodeError::BadTag { what: "disposable flag", tag }),
        };
        Ok(ContractCode { methods, state_cells, disposable })
    }
}

fn encode_body(body: &[Instr], w: &mut Writer) {
    w.u32(body.len() as u32);
    for ins in body {
        match ins {
            Instr::Push(v) => {
                w.u8(0x01).i64(*v);
            }
            Instr::Param(i) => {
                w.u8(0x02).u16(*i);
            }
            Instr::Load(c) => {
                w.u8(0x03).u16(*c);
            }
            Instr::Store(c) => {
                w.u8(0x04).u16(*c);
            }
            Instr::AddTo(c) => {
                w.u8(0x05).u16(*c);
            }
            Instr::Add => {
                w.u8(0x06);
            }
            Instr::Sub => {
                w.u8(0x07);
            }
            Instr::Mul => {
                w.u8(0x08);
            }
            Instr::Mod => {
                w.u8(0x09);
            }
            Instr::Lt => {
                w.u8(0x0A);
            }
            Instr::Eq => {
                w.u8(0x0B);
            }
            Instr::Gt => {
                w.u8(0x0C);
            }
            Instr::Rand => {
                w.u8(0x0D);
            }
            Instr::Dup => {
                w.u8(0x0E);
            }
            Instr::Pop => {
                w.u8(0x0F);
            }
            Instr::Loop { bound, body } => {
                w.u8(0x10).u32(*bound);
                encode_body(body, w);
            }
            Instr::Return(n) => {
                w.u8(0x11).u8(*n);
            }
        }
    }
}

fn decode_body(r: &mut Reader<'_>, depth: usize) -> Result<Vec<Instr>, DecodeError> {
    if depth > MAX_NESTING {
        return Err(DecodeError::BadLength(depth));
    }
    let n = r.u32()? as usize;
    if n > r.remaining() {
        return Err(DecodeError::BadLength(n));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let ins = match r.u8()? {
            0x01 => Instr::Push(r.i64()?),
            0x02 => Instr::Param(r.u16()?),
            0x03 => Instr::Load(r.u16()?),
            0x04 => Instr::Store(r.u16()?),
            0x05 => Instr::AddTo(r.u16()?),
            0x06 => Instr::Add,
            0x07 => Instr::Sub,
            0x08 => Instr::Mul,
            0x09 => Instr::Mod,
            0x0A => Instr::Lt,
            0x0B => Instr::Eq,
            0x0C => Instr::Gt,
            0x0D => Instr::Rand,
            0x0E => Instr::Dup,
            0x0F => Instr::Pop,
            0x10 => {
                let bound = r.u32()?;
                Instr::Loop { bound, body: decode_body(r, depth + 1)? }
            }
            0x11 => Instr::Return(r.u8()?),
            tag => return Err(DecodeError::BadTag { what: "opcode", tag }),
        };
        out.push(ins);
    }
    Ok(out)
}

/// Canonical result encoding: each value as 8 big-endian bytes.
pub fn encode_result(values: &[i64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_be_bytes()).collect()
}

pub fn decode_result(bytes: &[u8]) -> Option<Vec<i64>> {
    if !bytes.len().is_multiple_of(8) {
        return None;
    }
    Some(bytes.chunks(8).map(|c| i64::from_be_bytes(c.try_into().unwrap())).collect())
}

/// Contract id for an instance created by the given deployment transaction.
pub fn contract_id_for(deploy_tx_id: &Hash256) -> Hash256 {
    Hash256::digest(deploy_tx_id.as_bytes())
}

/// Invocation seed derived from the invoking transaction id.
pub fn seed_for(invoke_tx_id: &Hash256) -> u64 {
    invoke_tx_id.low_u64()
}

/// Creates an active instance. Cells listed in `init_state_spec` are
/// initialised from `init_params` in order; missing params leave a cell at 0.
pub fn deploy(
    code: &ContractCode,
    init_params: &[i64],
    deploy_tx_id: &Hash256,
    now: u64,
) -> Result<ContractInstance, VmError> {
    code.validate()?;
    let mut state = vec![0i64; code.state_cells.len()];
    for (cell, v) in state.iter_mut().zip(init_params) {
        *cell = *v;
    }
    Ok(ContractInstance {
        contract_id: contract_id_for(deploy_tx_id),
        code: code.clone(),
        state,
        lifecycle: Lifecycle::Active,
        time_begin: now,
        time_end: None,
    })
}

struct Machine<'a> {
    params: &'a [i64],
    state: &'a mut [i64],
    stack: Vec<i64>,
    rng: SplitMix64,
    executed: u64,
    budget: u64,
}

enum Flow {
    Continue,
    Return(Vec<i64>),
}

impl Machine<'_> {
    fn pop(&mut self) -> Result<i64, VmError> {
        self.stack.pop().ok_or(VmError::StackUnderflow)
    }

    fn push(&mut self, v: i64) -> Result<(), VmError> {
        if self.stack.len() >= MAX_STACK {
            return Err(VmError::StackOverflow);
        }
        self.stack.push(v);
        Ok(())
    }

    fn binary(&mut self, f: impl FnOnce(i64, i64) -> Result<i64, VmError>) -> Result<(), VmError> {
        let b = self.pop()?;
        let a = self.pop()?;
        let v = f(a, b)?;
        self.push(v)
    }

    fn run(&mut self, body: &[Instr]) -> Result<Flow, VmError> {
        for ins in body {
            self.executed += 1;
            if self.executed > self.budget {
                return Err(VmError::InstructionBudgetExceeded(self.budget));
            }
            match ins {
                Instr::Push(v) => self.push(*v)?,
                Instr::Param(i) => {
                    let v = *self.params.get(*i as usize).ok_or(VmError::MissingParam(*i))?;
                    self.push(v)?
                }
                Instr::Load(c) => self.push(self.state[*c as usize])?,
                Instr::Store(c) => self.state[*c as usize] = self.pop()?,
                Instr::AddTo(c) => {
                    let v = self.pop()?;
                    let cell = &mut self.state[*c as usize];
                    *cell = cell.wrapping_add(v);
                }
                Instr::Add => self.binary(|a, b| Ok(a.wrapping_add(b)))?,
                Instr::Sub => self.binary(|a, b| Ok(a.wrapping_sub(b)))?,
                Instr::Mul => self.binary(|a, b| Ok(a.wrapping_mul(b)))?,
                Instr::Mod => self.binary(|a, b| {
                    if b == 0 {
                        Err(VmError::DivisionByZero)
                    } else {
                        Ok(a.wrapping_rem_euclid(b))
                    }
                })?,
                Instr::Lt => self.binary(|a, b| Ok((a < b) as i64))?,
                Instr::Eq => self.binary(|a, b| Ok((a == b) as i64))?,
                Instr::Gt => self.binary(|a, b| Ok((a > b) as i64))?,
                Instr::Rand => {
                    let v = (self.rng.next_u64() >> 1) as i64;
                    self.push(v)?
                }
                Instr::Dup => {
                    let v = *self.stack.last().ok_or(VmError::StackUnderflow)?;
                    self.push(v)?
                }
                Instr::Pop => {
                    self.pop()?;
                }
                Instr::Loop { bound, body } => {
                    let count = self.pop()?;
                    if count > *bound as i64 {
                        return Err(VmError::LoopBoundExceeded { count, bound: *bound });
                    }
                    for _ in 0..count.max(0) {
                        if let Flow::Return(v) = self.run(body)? {
                            return Ok(Flow::Return(v));
                        }
                    }
                }
                Instr::Return(n) => {
                    let n = *n as usize;
                    if self.stack.len() < n {
                        return Err(VmError::StackUnderflow);
                    }
                    let vals = self.stack.split_off(self.stack.len() - n);
                    return Ok(Flow::Return(vals));
                }
            }
        }
        Ok(Flow::Continue)
    }
}

/// Runs `method` against `instance` with the default instruction budget.
///
/// A disposable contract is terminated by its first successful call. Its
/// lifecycle collapses onto that call: `time_begin = time_end = now`.
pub fn invoke(
    instance: &mut ContractInstance,
    method: &str,
    params: &[i64],
    seed: u64,
    now: u64,
) -> Result<InvocationResult, VmError> {
    invoke_with_budget(instance, method, params, seed, now, INSTRUCTION_BUDGET)
}

pub fn invoke_with_budget(
    instance: &mut ContractInstance,
    method: &str,
    params: &[i64],
    seed: u64,
    now: u64,
    budget: u64,
) -> Result<InvocationResult, VmError> {
    if instance.lifecycle == Lifecycle::Terminated {
        return Err(VmError::ContractTerminated);
    }
    let body = instance
        .code
        .methods
        .get(method)
        .ok_or_else(|| VmError::UnknownMethod(method.to_string()))?;
    // run on a scratch copy so faults leave state untouched
    let mut scratch = instance.state.clone();
    let mut m = Machine {
        params,
        state: &mut scratch,
        stack: Vec::new(),
        rng: SplitMix64::new(seed),
        executed: 0,
        budget,
    };
    let values = match m.run(body)? {
        Flow::Return(v) => v,
        Flow::Continue => Vec::new(),
    };
    let executed = m.executed;
    let state_delta = instance
        .code
        .state_cells
        .iter()
        .zip(instance.state.iter().zip(&scratch))
        .filter(|(_, (old, new))| old != new)
        .map(|(name, (_, new))| (name.clone(), *new))
        .collect();
    instance.state = scratch;
    if instance.code.disposable {
        if now < instance.time_begin {
            return Err(VmError::TimeReversed { begin: instance.time_begin, end: now });
        }
        instance.time_begin = now;
        terminate(instance, now)?;
    }
    Ok(InvocationResult {
        result_bytes: encode_result(&values),
        instructions_executed: executed,
        state_delta,
    })
}

pub fn terminate(instance: &mut ContractInstance, now: u64) -> Result<(), VmError> {
    if instance.lifecycle == Lifecycle::Terminated {
        return Err(VmError::ContractTerminated);
    }
    if now < instance.time_begin {
        return Err(VmError::TimeReversed { begin: instance.time_begin, end: now });
    }
    instance.lifecycle = Lifecycle::Terminated;
    instance.time_end = Some(now);
    Ok(())
}

/// Deploy-and-invoke in one step from an embedded transaction; the
/// instance begins at the invocation time.
pub fn deploy_embedded(tx: &Transaction, now: u64) -> Result<(ContractInstance, InvocationResult), VmError> {
    let TxPayload::EmbeddedDeployInvoke { code, init_params, method, params } = &tx.payload else {
        return Err(VmError::NotADeployment);
    };
    let id = tx.id();
    let mut inst = deploy(code, init_params, &id, now)?;
    let res = invoke(&mut inst, method, params, seed_for(&id), now)?;
    Ok((inst, res))
}

/// Burden tuple for a contract: occupation time from begin to end (or to
/// `horizon` while still active) and the number of lifecycle transactions
/// needed to validate it.
pub fn compute_burden(
    instance: &ContractInstance,
    related_txs: &[Transaction],
    horizon: Option<u64>,
) -> Result<BurdenMetrics, VmError> {
    let end = instance.time_end.or(horizon).unwrap_or(instance.time_begin);
    if end < instance.time_begin {
        return Err(VmError::TimeReversed { begin: instance.time_begin, end });
    }
    let transaction_numbers = related_txs
        .iter()
        .filter(|t| {
            matches!(
                t.kind(),
                TxKind::Deploy | TxKind::Invoke | TxKind::Terminate | TxKind::EmbeddedDeployInvoke
            )
        })
        .count() as u64;
    Ok(BurdenMetrics { time_occupation: end - instance.time_begin, transaction_numbers })
}

/// Loop-heavy test contract: draws `n` uniformly from `[100, upper]`, then
/// sums `n` draws from `[1, 100]`, returning the sum. The sum is kept in the
/// single `acc` cell, reset at the start of each call.
pub fn random_sum_contract(upper: i64, disposable: bool) -> ContractCode {
    assert!(upper >= 100 && upper <= MAX_LOOP_BOUND as i64);
    let acc = 0;
    ContractCode::new(&["acc"], disposable).with_method(
        "run",
        vec![
            Instr::Push(0),
            Instr::Store(acc),
            Instr::Rand,
            Instr::Push(upper - 100 + 1),
            Instr::Mod,
            Instr::Push(100),
            Instr::Add,
            Instr::Loop {
                bound: upper as u32,
                body: vec![
                    Instr::Rand,
                    Instr::Push(100),
                    Instr::Mod,
                    Instr::Push(1),
                    Instr::Add,
                    Instr::AddTo(acc),
                ],
            },
            Instr::Load(acc),
            Instr::Return(1),
        ],
    )
}

/// Upper loop bound of the reference workload.
pub const REFERENCE_UPPER: i64 = 100 * 100 * 100;

/// Order-sensitive accumulator: `push(x)` sets `acc = acc * 31 + x` and
/// returns the new value.
pub fn accumulator_contract(disposable: bool) -> ContractCode {
    ContractCode::new(&["acc"], disposable).with_method(
        "push",
        vec![
            Instr::Load(0),
            Instr::Push(31),
            Instr::Mul,
            Instr::Param(0),
            Instr::Add,
            Instr::Dup,
            Instr::Store(0),
            Instr::Return(1),
        ],
    )
}

/// Returns its constant regardless of seed or params.
pub fn constant_contract(value: i64, disposable: bool) -> ContractCode {
    ContractCode::new(&[], disposable).with_method("get", vec![Instr::Push(value), Instr::Return(1)])
}
