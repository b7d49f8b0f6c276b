//! Device actors: one control thread per rank running a step program.
//!
//! The OFI vocabulary has no step that creates NIC work; `ib_put` (and the
//! posting side of `barrier`/`am_send`/`halo`) only posts on the IB backend.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ids::Rank;
use crate::simcore::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cmp {
    Eq,
    Ne,
    Gt,
    Ge,
    Lt,
    Le,
}

impl Cmp {
    pub fn eval(self, lhs: u64, rhs: u64) -> bool {
        match self {
            Cmp::Eq => lhs == rhs,
            Cmp::Ne => lhs != rhs,
            Cmp::Gt => lhs > rhs,
            Cmp::Ge => lhs >= rhs,
            Cmp::Lt => lhs < rhs,
            Cmp::Le => lhs <= rhs,
        }
    }

    pub fn parse(s: &str) -> Option<Cmp> {
        Some(match s.to_ascii_uppercase().as_str() {
            "EQ" | "==" => Cmp::Eq,
            "NE" | "!=" => Cmp::Ne,
            "GT" | ">" => Cmp::Gt,
            "GE" | ">=" => Cmp::Ge,
            "LT" | "<" => Cmp::Lt,
            "LE" | "<=" => Cmp::Le,
            _ => return None,
        })
    }
}

impl fmt::Display for Cmp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Cmp::Eq => "EQ",
            Cmp::Ne => "NE",
            Cmp::Gt => "GT",
            Cmp::Ge => "GE",
            Cmp::Lt => "LT",
            Cmp::Le => "LE",
        };
        f.write_str(s)
    }
}

/// Absolute rank or an offset from the executing rank, modulo P.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PeerSpec {
    Abs(Rank),
    Rel(i64),
    /// Sender of the message whose handler is running.
    Source,
}

impl PeerSpec {
    /// `None` for `Source` outside a handler.
    pub fn resolve(self, rank: Rank, p: usize, source: Option<Rank>) -> Option<Rank> {
        match self {
            PeerSpec::Abs(r) => Some(r),
            PeerSpec::Rel(d) => Some((rank as i64 + d).rem_euclid(p as i64) as Rank),
            PeerSpec::Source => source,
        }
    }

    pub fn parse(s: &str) -> Option<PeerSpec> {
        match s {
            "left" => Some(PeerSpec::Rel(-1)),
            "right" => Some(PeerSpec::Rel(1)),
            "src" | "source" => Some(PeerSpec::Source),
            _ if s.starts_with('+') || s.starts_with('-') => s.parse().ok().map(PeerSpec::Rel),
            _ => s.parse().ok().map(PeerSpec::Abs),
        }
    }
}

impl fmt::Display for PeerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PeerSpec::Abs(r) => write!(f, "{r}"),
            PeerSpec::Rel(d) => write!(f, "{d:+}"),
            PeerSpec::Source => f.write_str("src"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeviceStep {
    Compute(SimTime),
    /// Doorbell on a named user counter of this rank.
    Trigger {
        counter: String,
        value: u32,
    },
    WaitUntil {
        flag: String,
        cmp: Cmp,
        value: u64,
    },
    Quiet,
    BarrierAll,
    AmSend {
        peer: PeerSpec,
        handler: u32,
        args: Vec<u8>,
    },
    AmPollDispatch,
    /// Poll and dispatch until `count` more messages have been handled.
    AmDrain {
        count: u64,
    },
    IbPut {
        peer: PeerSpec,
        src: String,
        dst: String,
        size: u32,
    },
    /// One stage-ahead halo exchange with the line neighbours.
    Halo,
    Repeat {
        count: u64,
        body: Arc<[DeviceStep]>,
    },
}

impl DeviceStep {
    /// Creates NIC work directly; only legal on the IB backend.
    pub fn posts_directly(&self) -> bool {
        matches!(self, DeviceStep::IbPut { .. })
    }

    /// Visits this step and every nested step.
    pub fn walk<'a>(&'a self, f: &mut dyn FnMut(&'a DeviceStep)) {
        f(self);
        if let DeviceStep::Repeat { body, .. } = self {
            for s in body.iter() {
                s.walk(f);
            }
        }
    }

    /// Number of primitive steps executed, with repeats expanded.
    pub fn expanded_len(&self) -> u64 {
        match self {
            DeviceStep::Repeat { count, body } => {
                count * body.iter().map(|s| s.expanded_len()).sum::<u64>()
            }
            _ => 1,
        }
    }
}

impl fmt::Display for DeviceStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeviceStep::Compute(t) => write!(f, "compute {}", t.nanos()),
            DeviceStep::Trigger { counter, value } => write!(f, "trigger {counter} {value}"),
            DeviceStep::WaitUntil { flag, cmp, value } => write!(f, "wait {flag} {cmp} {value}"),
            DeviceStep::Quiet => f.write_str("quiet"),
            DeviceStep::BarrierAll => f.write_str("barrier"),
            DeviceStep::AmSend {
                peer,
                handler,
                args,
            } => {
                write!(f, "am_send {peer} {handler}")?;
                if !args.is_empty() {
                    write!(f, " 0x")?;
                    for b in args {
                        write!(f, "{b:02x}")?;
                    }
                }
                Ok(())
            }
            DeviceStep::AmPollDispatch => f.write_str("am_poll"),
            DeviceStep::AmDrain { count } => write!(f, "am_drain {count}"),
            DeviceStep::IbPut {
                peer,
                src,
                dst,
                size,
            } => write!(f, "ib_put {peer} {src} {dst} {size}"),
            DeviceStep::Halo => f.write_str("halo"),
            DeviceStep::Repeat { count, body } => {
                write!(f, "repeat {count} {{")?;
                for s in body.iter() {
                    write!(f, " {s};")?;
                }
                f.write_str(" }")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ProgramError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step line {}: {}", self.line, self.message)
    }
}

/// Parses a duration: bare nanoseconds or a `ns`/`us`/`ms`/`s` suffix.
pub fn parse_duration(s: &str) -> Option<SimTime> {
    let (num, scale) = if let Some(v) = s.strip_suffix("ns") {
        (v, 1)
    } else if let Some(v) = s.strip_suffix("us") {
        (v, 1_000)
    } else if let Some(v) = s.strip_suffix("ms") {
        (v, 1_000_000)
    } else if let Some(v) = s.strip_suffix('s') {
        (v, 1_000_000_000)
    } else {
        (s, 1)
    };
    let num = num.replace('_', "");
    if let Ok(n) = num.parse::<u64>() {
        return n.checked_mul(scale).map(SimTime);
    }
    // Fractional values must still land on a whole nanosecond.
    let v: f64 = num.parse().ok()?;
    let ns = v * scale as f64;
    if ns < 0.0 || (ns - ns.round()).abs() > 1e-6 {
        return None;
    }
    Some(SimTime(ns.round() as u64))
}

fn parse_args(s: &str) -> Option<Vec<u8>> {
    let hex = s.strip_prefix("0x")?;
    if hex.len() % 2 != 0 {
        return None;
    }
    (0..hex.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&hex[i..i + 2], 16).ok())
        .collect()
}

/// Parses step lines. Lines may hold several steps separated by `;`, and
/// `repeat N {` ... `}` blocks may span lines.
pub fn parse_program<S: AsRef<str>>(lines: &[S]) -> Result<Vec<DeviceStep>, ProgramError> {
    let mut tokens: Vec<(usize, String)> = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        let line = line.as_ref();
        let line = line.split('#').next().unwrap_or("");
        let spaced = line
            .replace('{', " { ")
            .replace('}', " } ")
            .replace(';', " ; ");
        for stmt in spaced.split(';') {
            let words: Vec<&str> = stmt.split_whitespace().collect();
            let mut cur = Vec::new();
            for w in words {
                if w == "{" || w == "}" {
                    if !cur.is_empty() {
                        tokens.push((i + 1, cur.join(" ")));
                        cur.clear();
                    }
                    tokens.push((i + 1, w.to_string()));
                } else {
                    cur.push(w);
                }
            }
            if !cur.is_empty() {
                tokens.push((i + 1, cur.join(" ")));
            }
        }
    }
    let mut pos = 0;
    let steps = parse_block(&tokens, &mut pos, false)?;
    Ok(steps)
}

fn parse_block(
    tokens: &[(usize, String)],
    pos: &mut usize,
    nested: bool,
) -> Result<Vec<DeviceStep>, ProgramError> {
    let mut out = Vec::new();
    while *pos < tokens.len() {
        let (line, text) = &tokens[*pos];
        *pos += 1;
        if text == "}" {
            if nested {
                return Ok(out);
            }
            return Err(ProgramError {
                line: *line,
                message: "unmatched '}'".into(),
            });
        }
        if text == "{" {
            return Err(ProgramError {
                line: *line,
                message: "unexpected '{'".into(),
            });
        }
        let words: Vec<&str> = text.split_whitespace().collect();
        let err = |m: &str| ProgramError {
            line: *line,
            message: format!("{m}: '{text}'"),
        };
        let step = match words.as_slice() {
            ["compute", d] => {
                DeviceStep::Compute(parse_duration(d).ok_or_else(|| err("bad duration"))?)
            }
            ["trigger", c, v] => DeviceStep::Trigger {
                counter: c.to_string(),
                value: v.parse().map_err(|_| err("bad counter value"))?,
            },
            ["wait", flag, cmp, v] | ["wait_until", flag, cmp, v] => DeviceStep::WaitUntil {
                flag: flag.to_string(),
                cmp: Cmp::parse(cmp).ok_or_else(|| err("bad comparison"))?,
                value: v.parse().map_err(|_| err("bad wait value"))?,
            },
            ["quiet"] => DeviceStep::Quiet,
            ["barrier"] | ["barrier_all"] => DeviceStep::BarrierAll,
            ["am_send", peer, h, rest @ ..] if rest.len() <= 1 => DeviceStep::AmSend {
                peer: PeerSpec::parse(peer).ok_or_else(|| err("bad peer"))?,
                handler: h.parse().map_err(|_| err("bad handler id"))?,
                args: match rest.first() {
                    Some(a) => parse_args(a).ok_or_else(|| err("args must be 0x-prefixed hex"))?,
                    None => Vec::new(),
                },
            },
            ["am_poll"] | ["am_poll_dispatch"] => DeviceStep::AmPollDispatch,
            ["am_drain", n] => DeviceStep::AmDrain {
                count: n.parse().map_err(|_| err("bad count"))?,
            },
            ["ib_put", peer, src, dst, size] => DeviceStep::IbPut {
                peer: PeerSpec::parse(peer).ok_or_else(|| err("bad peer"))?,
                src: src.to_string(),
                dst: dst.to_string(),
                size: size.parse().map_err(|_| err("bad size"))?,
            },
            ["halo"] => DeviceStep::Halo,
            ["repeat", n] => {
                let count = n.parse().map_err(|_| err("bad repeat count"))?;
                match tokens.get(*pos) {
                    Some((_, t)) if t == "{" => *pos += 1,
                    _ => return Err(err("repeat needs '{'")),
                }
                let body = parse_block(tokens, pos, true)?;
                DeviceStep::Repeat {
                    count,
                    body: body.into(),
                }
            }
            _ => return Err(err("unknown step")),
        };
        out.push(step);
    }
    if nested {
        let line = tokens.last().map(|t| t.0).unwrap_or(0);
        return Err(ProgramError {
            line,
            message: "missing '}'".into(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct Frame {
    steps: Arc<[DeviceStep]>,
    pc: usize,
    remaining: u64,
    source: Option<Rank>,
}

/// Program counter over nested repeat blocks.
#[derive(Debug, Clone)]
pub struct ProgramCursor {
    frames: Vec<Frame>,
}

impl ProgramCursor {
    pub fn new(program: Arc<[DeviceStep]>) -> Self {
        ProgramCursor {
            frames: vec![Frame {
                steps: program,
                pc: 0,
                remaining: 1,
                source: None,
            }],
        }
    }

    pub fn empty() -> Self {
        ProgramCursor { frames: Vec::new() }
    }

    /// Runs `body` once before continuing the current program.
    pub fn push(&mut self, body: Arc<[DeviceStep]>) {
        self.frames.push(Frame {
            steps: body,
            pc: 0,
            remaining: 1,
            source: None,
        });
    }

    /// Runs a handler body on behalf of a message from `source`.
    pub fn push_handler(&mut self, body: Arc<[DeviceStep]>, source: Rank) {
        self.frames.push(Frame {
            steps: body,
            pc: 0,
            remaining: 1,
            source: Some(source),
        });
    }

    /// Source of the innermost running handler.
    pub fn source(&self) -> Option<Rank> {
        self.frames.iter().rev().find_map(|f| f.source)
    }

    pub fn depth(&self) -> usize {
        self.frames.len()
    }

    /// The next primitive step, or `None` once the program is finished.
    pub fn next_step(&mut self) -> Option<DeviceStep> {
        loop {
            let frame = self.frames.last_mut()?;
            if frame.pc >= frame.steps.len() {
                frame.remaining -= 1;
                if frame.remaining == 0 {
                    self.frames.pop();
                } else {
                    frame.pc = 0;
                }
                continue;
            }
            let step = frame.steps[frame.pc].clone();
            frame.pc += 1;
            match step {
                DeviceStep::Repeat { count, body } => {
                    if count > 0 && !body.is_empty() {
                        self.frames.push(Frame {
                            steps: body,
                            pc: 0,
                            remaining: count,
                            source: None,
                        });
                    }
                }
                s => return Some(s),
            }
        }
    }
}
