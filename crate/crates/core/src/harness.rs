//! Attack/defense matrix and the misspeculation-source self tests.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::defenses::DefenseConfig;
use crate::isa::{assemble, Addr};
use crate::machine::{
    AddressSpaceId, ContextId, Domain, Machine, MachineConfig, Mode, Perms, Preset, BENIGN_GADGET,
    PAGE_SIZE,
};
use crate::pipeline::{run, BranchRecord, FrameCause, HaltReason, PredictionSource};
use crate::predictors::UnderfillMode;
use crate::scenarios::{
    build_scenario, run_attack_with, ScenarioError, ScenarioId, ScenarioParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MatrixColumn {
    Lfence,
    Ibrs,
    Stibp,
    Ibpb,
    Retpoline,
    RsbRefill,
    SmepSmap,
}

impl MatrixColumn {
    pub const ALL: [MatrixColumn; 7] = [
        MatrixColumn::Lfence,
        MatrixColumn::Ibrs,
        MatrixColumn::Stibp,
        MatrixColumn::Ibpb,
        MatrixColumn::Retpoline,
        MatrixColumn::RsbRefill,
        MatrixColumn::SmepSmap,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MatrixColumn::Lfence => "lfence",
            MatrixColumn::Ibrs => "ibrs",
            MatrixColumn::Stibp => "stibp",
            MatrixColumn::Ibpb => "ibpb",
            MatrixColumn::Retpoline => "retpoline",
            MatrixColumn::RsbRefill => "rsb-refill",
            MatrixColumn::SmepSmap => "smep-smap",
        }
    }

    pub fn apply(self, cfg: &mut DefenseConfig) {
        match self {
            MatrixColumn::Lfence => cfg.lfence_pass = true,
            MatrixColumn::Ibrs => cfg.ibrs = true,
            MatrixColumn::Stibp => cfg.stibp = true,
            MatrixColumn::Ibpb => cfg.ibpb_on_switch = true,
            MatrixColumn::Retpoline => cfg.retpoline = true,
            MatrixColumn::RsbRefill => cfg.rsb_refill_on_kernel_entry = true,
            MatrixColumn::SmepSmap => {
                cfg.smep = true;
                cfg.smap = true;
            }
        }
    }

    /// Defense configuration of one cell: only this column plus the row's
    /// environmental requirements.
    pub fn cell_config(self, row: &[crate::scenarios::Requirement]) -> DefenseConfig {
        let mut cfg = DefenseConfig::none();
        self.apply(&mut cfg);
        for r in row {
            r.apply(&mut cfg, self == MatrixColumn::SmepSmap);
        }
        cfg
    }
}

impl fmt::Display for MatrixColumn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cell {
    Bypass,
    Blocked,
}

impl Cell {
    pub fn as_str(self) -> &'static str {
        match self {
            Cell::Bypass => "BYPASS",
            Cell::Blocked => "BLOCKED",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellResult {
    pub attack: ScenarioId,
    pub column: MatrixColumn,
    pub cell: Cell,
    pub cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatrixReport {
    pub preset: Preset,
    pub seed: u64,
    pub config_hash: String,
    /// Row-major, rows in [`ScenarioId::MATRIX_ROWS`] order.
    pub cells: Vec<CellResult>,
    pub requirements: Vec<(ScenarioId, Vec<&'static str>)>,
}

impl MatrixReport {
    pub fn rows(&self) -> &'static [ScenarioId] {
        &ScenarioId::MATRIX_ROWS
    }

    pub fn columns(&self) -> &'static [MatrixColumn] {
        &MatrixColumn::ALL
    }

    pub fn cell(&self, attack: ScenarioId, column: MatrixColumn) -> Option<Cell> {
        self.cells
            .iter()
            .find(|c| c.attack == attack && c.column == column)
            .map(|c| c.cell)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("attack,defense,outcome,cycles,seed\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                c.attack,
                c.column,
                c.cell.as_str(),
                c.cycles,
                self.seed
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "preset {}  seed {}  config {}\n\n",
            self.preset, self.seed, self.config_hash
        );
        let _ = write!(out, "{:<10}", "attack");
        for col in MatrixColumn::ALL {
            let _ = write!(out, " {:>10}", col.as_str());
        }
        out.push('\n');
        for row in ScenarioId::MATRIX_ROWS {
            let _ = write!(out, "{:<10}", row.as_str());
            for col in MatrixColumn::ALL {
                let v = self.cell(row, col).map_or("?", Cell::as_str);
                let _ = write!(out, " {v:>10}");
            }
            out.push('\n');
        }
        out.push_str("\nBYPASS = attack recovered the whole secret with that defense on\n");
        out.push_str(
            "row requirements (held in every cell except where the column is the requirement):\n",
        );
        for (id, reqs) in &self.requirements {
            let _ = writeln!(out, "  {:<10} {}", id.as_str(), reqs.join("; "));
        }
        out
    }
}

/// Stable fingerprint of everything a matrix depends on.
pub fn config_hash(preset: Preset, seed: u64) -> String {
    let mut h = Sha256::new();
    let mut cfg = MachineConfig::preset(preset);
    cfg.seed = seed;
    cfg.defenses = DefenseConfig::none();
    h.update(cfg.to_text().as_bytes());
    for id in ScenarioId::MATRIX_ROWS {
        if let Ok(s) = build_scenario(id, &ScenarioParams::default()) {
            for p in &s.programs {
                h.update(p.name.as_bytes());
                h.update(p.source.as_bytes());
            }
            h.update(&s.secret.bytes);
        }
    }
    let digest = h.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs every matrix cell on `jobs` worker threads. Output does not
/// depend on `jobs`.
pub fn run_matrix(preset: Preset, seed: u64, jobs: usize) -> Result<MatrixReport, ScenarioError> {
    let params = ScenarioParams::default();
    let mut scenarios = BTreeMap::new();
    for id in ScenarioId::MATRIX_ROWS {
        scenarios.insert(id, build_scenario(id, &params)?);
    }
    let work: Vec<(ScenarioId, MatrixColumn)> = ScenarioId::MATRIX_ROWS
        .iter()
        .flat_map(|&r| MatrixColumn::ALL.iter().map(move |&c| (r, c)))
        .collect();
    let jobs = jobs.clamp(1, work.len());
    let run_cell = |(id, col): (ScenarioId, MatrixColumn)| -> Result<CellResult, ScenarioError> {
        let s = &scenarios[&id];
        let mut cfg = MachineConfig::preset(preset);
        cfg.seed = seed;
        cfg.defenses = col.cell_config(&s.requirements);
        let o = run_attack_with(s, &cfg, None)?;
        Ok(CellResult {
            attack: id,
            column: col,
            cell: if o.bypassed {
                Cell::Bypass
            } else {
                Cell::Blocked
            },
            cycles: o.cycles,
        })
    };
    let mut results: Vec<CellResult> = if jobs == 1 {
        work.iter()
            .map(|&w| run_cell(w))
            .collect::<Result<_, _>>()?
    } else {
        let chunks: Vec<Vec<(ScenarioId, MatrixColumn)>> = (0..jobs)
            .map(|j| work.iter().skip(j).step_by(jobs).copied().collect())
            .collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .iter()
                .map(|chunk| {
                    let run_cell = &run_cell;
                    scope.spawn(move || {
                        chunk
                            .iter()
                            .map(|&w| run_cell(w))
                            .collect::<Result<Vec<_>, _>>()
                    })
                })
                .collect();
            let mut all = Vec::new();
            for h in handles {
                all.extend(h.join().expect("matrix worker panicked")?);
            }
            Ok::<_, ScenarioError>(all)
        })?
    };
    results.sort_by_key(|c| (c.attack, c.column));
    let requirements = ScenarioId::MATRIX_ROWS
        .iter()
        .map(|id| {
            let reqs = scenarios[id]
                .requirements
                .iter()
                .map(|r| r.describe())
                .collect();
            (*id, reqs)
        })
        .collect();
    Ok(MatrixReport {
        preset,
        seed,
        config_hash: config_hash(preset, seed),
        cells: results,
        requirements,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Source {
    S1,
    S2,
    S3,
    S4,
}

impl Source {
    pub const ALL: [Source; 4] = [Source::S1, Source::S2, Source::S3, Source::S4];

    pub fn as_str(self) -> &'static str {
        match self {
            Source::S1 => "s1",
            Source::S2 => "s2",
            Source::S3 => "s3",
            Source::S4 => "s4",
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Source::S1 => "overfill/underfill",
            Source::S2 => "direct software stack manipulation",
            Source::S3 => "squashed call persistence",
            Source::S4 => "cross-context reuse",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Source::ALL
            .into_iter()
            .find(|x| x.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown source `{s}` (expected s1..s4 or all)"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelftestResult {
    pub source: Source,
    pub underfill: UnderfillMode,
    pub refill: bool,
    pub pass: bool,
    pub detail: String,
}

impl fmt::Display for SelftestResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<4} {:<36} underfill={:<8} refill={:<5} {}",
            self.source,
            if self.pass { "pass" } else { "FAIL" },
            self.source.describe(),
            self.underfill.as_str(),
            self.refill,
            self.detail
        )
    }
}

fn selftest_config(underfill: UnderfillMode, refill: bool) -> MachineConfig {
    let mut cfg = MachineConfig {
        rsb_underfill: underfill,
        ..MachineConfig::default()
    };
    cfg.defenses.rsb_refill_on_kernel_entry = refill;
    cfg
}

struct Demo {
    m: Machine,
    schedule: Vec<(ContextId, u64)>,
}

/// One user context per source at 0x1000, each in its own address space.
fn demo(
    cfg: MachineConfig,
    sources: &[&str],
) -> Result<(Demo, Vec<crate::isa::ProgramImage>), String> {
    let mut m = Machine::new(cfg).map_err(|e| e.to_string())?;
    let mut images = Vec::new();
    let mut schedule = Vec::new();
    for (i, src) in sources.iter().enumerate() {
        let space = Some(AddressSpaceId(i as u32 + 1));
        let img = assemble(src).map_err(|e| e.to_string())?;
        m.map_region(0x1000, 4 * PAGE_SIZE, Perms::RX, Domain::User, space)
            .map_err(|e| e.to_string())?;
        m.map_region(0x8000, PAGE_SIZE, Perms::RW, Domain::User, space)
            .map_err(|e| e.to_string())?;
        let id = m
            .spawn_context(&img, Mode::User, AddressSpaceId(i as u32 + 1))
            .map_err(|e| e.to_string())?;
        schedule.push((id, 1000));
        images.push(img);
    }
    Ok((Demo { m, schedule }, images))
}

fn run_demo(d: &mut Demo) -> Result<Vec<BranchRecord>, String> {
    let r = run(&mut d.m, &d.schedule, 100_000).map_err(|e| e.to_string())?;
    if r.halt_reason != HaltReason::Halt {
        return Err(format!("demo stopped: {:?}", r.halt_reason));
    }
    Ok(r.branches)
}

fn returns_at(branches: &[BranchRecord], pc: Addr) -> Vec<&BranchRecord> {
    branches
        .iter()
        .filter(|b| b.cause == FrameCause::Return && b.pc == pc)
        .collect()
}

fn sym(img: &crate::isa::ProgramImage, name: &str) -> Result<Addr, String> {
    img.symbol(name)
        .ok_or_else(|| format!("missing label {name}"))
}

/// Calls nested `capacity + 4` deep, twice. The outermost returns underflow
/// the RSB: the fallback predictor must supply them on the second pass,
/// or nothing must be predicted at all.
fn selftest_s1(cfg: MachineConfig) -> Result<String, String> {
    let depth = cfg.rsb_capacity + 4;
    let mut src = String::from(".org 0x1000\nmain:\n  mov r8, 2\nagain:\n  call f0\n  sub r8, 1\n  cmp r8, 0\n  jnz again\n  halt\n");
    for i in 0..depth {
        let _ = write!(src, "f{i}:\n  call f{}\nr{i}:\n  ret\n", i + 1);
    }
    let _ = writeln!(src, "f{depth}:\nr{depth}:\n  ret");
    let (mut d, imgs) = demo(cfg, &[&src])?;
    let branches = run_demo(&mut d)?;
    let mut rsb = 0;
    let mut underflow = Vec::new();
    for i in 0..=depth {
        let pc = sym(&imgs[0], &format!("r{i}"))?;
        let rs = returns_at(&branches, pc);
        if rs.len() != 2 {
            return Err(format!("r{i}: expected 2 returns, saw {}", rs.len()));
        }
        let second = rs[1];
        if second.source == PredictionSource::Rsb {
            rsb += 1;
        } else {
            underflow.push(second);
        }
    }
    // The main call plus `depth` nested calls; the ring keeps `capacity`.
    let expect_underflow = depth + 2 - cfg.rsb_capacity;
    if rsb != cfg.rsb_capacity || underflow.len() != expect_underflow - 1 {
        return Err(format!(
            "{rsb} returns predicted from the RSB, {} underflowed",
            underflow.len()
        ));
    }
    match cfg.rsb_underfill {
        UnderfillMode::FallbackIndirect => {
            if underflow
                .iter()
                .all(|b| b.source == PredictionSource::Btb && b.predicted == Some(b.actual))
            {
                Ok(format!(
                    "{} underflowed returns predicted by the BTB",
                    underflow.len()
                ))
            } else {
                Err("underflowed return not predicted by the BTB".into())
            }
        }
        UnderfillMode::NoPrediction => {
            if underflow
                .iter()
                .all(|b| b.source == PredictionSource::Stall && b.predicted.is_none())
            {
                Ok(format!(
                    "{} underflowed returns made no prediction",
                    underflow.len()
                ))
            } else {
                Err("underflowed return was predicted".into())
            }
        }
    }
}

fn expect_stale(
    branches: &[BranchRecord],
    pc: Addr,
    predicted: Addr,
    actual: Addr,
) -> Result<(), String> {
    let b = returns_at(branches, pc)
        .into_iter()
        .next()
        .ok_or_else(|| format!("no return at {pc:#x}"))?;
    if b.source == PredictionSource::Rsb
        && b.predicted == Some(predicted)
        && b.actual == actual
        && b.squashed
    {
        Ok(())
    } else {
        Err(format!(
            "ret at {pc:#x}: predicted {:?} actual {:#x}, wanted {predicted:#x} -> {actual:#x}",
            b.predicted, b.actual
        ))
    }
}

/// Software stack and RSB disagree after a frame pop, a call rewritten as
/// push+jmp, and a return rewritten as pop+jmp.
fn selftest_s2(cfg: MachineConfig) -> Result<String, String> {
    let frame_pop = ".org 0x1000
main:
  call f
done:
  halt
f:
  call g
stale:
  halt
g:
  pop r9
gret:
  ret";
    let push_jmp = ".org 0x1000
main:
  call f
after:
  halt
f:
  mov r7, target
  push r7
  jmp g
g:
  ret
target:
  halt";
    let pop_jmp = ".org 0x1000
main:
  call f
after:
  mov r7, done
  push r7
ret2:
  ret
done:
  halt
f:
  pop r9
  jmp r9";
    let mut notes = Vec::new();
    for (name, src, ret, predicted, actual) in [
        ("frame pop", frame_pop, "gret", "stale", "done"),
        ("push+jmp", push_jmp, "g", "after", "target"),
        ("pop+jmp", pop_jmp, "ret2", "after", "done"),
    ] {
        let (mut d, imgs) = demo(cfg, &[src])?;
        let branches = run_demo(&mut d)?;
        let img = &imgs[0];
        expect_stale(
            &branches,
            sym(img, ret)?,
            sym(img, predicted)?,
            sym(img, actual)?,
        )
        .map_err(|e| format!("{name}: {e}"))?;
        notes.push(name);
    }
    Ok(format!("stale RSB prediction after {}", notes.join(", ")))
}

/// A call issued only on a squashed path leaves its return address on the
/// RSB, where the next return consumes it.
fn selftest_s3(cfg: MachineConfig) -> Result<String, String> {
    let src = ".org 0x1000
main:
  mov r1, 0
  store [flag], r1
  clflush [flag]
  load r2, [flag]
  cmp r2, 0
  jz skip
  call t
a3:
  halt
skip:
  mov r7, done
  push r7
ret3:
  ret
done:
  halt
t:
  lfence
  halt
.extern flag, 0x8040";
    let (mut d, imgs) = demo(cfg, &[src])?;
    let branches = run_demo(&mut d)?;
    let img = &imgs[0];
    let jz = branches
        .iter()
        .find(|b| b.cause == FrameCause::CondBranch)
        .ok_or("no conditional branch")?;
    if !jz.squashed {
        return Err("branch was not mispredicted".into());
    }
    expect_stale(
        &branches,
        sym(img, "ret3")?,
        sym(img, "a3")?,
        sym(img, "done")?,
    )?;
    Ok("return consumed the squashed call's entry".into())
}

/// A context switches away mid-call; the next context's return consumes
/// its entry unless the switch refilled the RSB.
fn selftest_s4(cfg: MachineConfig) -> Result<String, String> {
    let a = ".org 0x1000
main:
  call f
back:
  halt
f:
  yield
  ret";
    let b = ".org 0x1000
main:
  mov r1, 0
  mov r7, done
  push r7
ret4:
  ret
done:
  halt";
    let (mut d, imgs) = demo(cfg, &[a, b])?;
    let branches = run_demo(&mut d)?;
    let pc = sym(&imgs[1], "ret4")?;
    let r = branches
        .iter()
        .find(|x| x.ctx == ContextId(1) && x.pc == pc && x.cause == FrameCause::Return)
        .ok_or("no return in the second context")?;
    let want = if cfg.defenses.rsb_refill_on_kernel_entry {
        BENIGN_GADGET
    } else {
        sym(&imgs[0], "back")?
    };
    if r.predicted == Some(want) {
        Ok(if cfg.defenses.rsb_refill_on_kernel_entry {
            "refill replaced the foreign entry with the benign gadget".into()
        } else {
            format!("return predicted the other context's {want:#x}")
        })
    } else {
        Err(format!("predicted {:?}, wanted {want:#x}", r.predicted))
    }
}

pub fn selftest(source: Source, underfill: UnderfillMode, refill: bool) -> SelftestResult {
    let cfg = selftest_config(underfill, refill);
    let r = match source {
        Source::S1 => selftest_s1(cfg),
        Source::S2 => selftest_s2(cfg),
        Source::S3 => selftest_s3(cfg),
        Source::S4 => selftest_s4(cfg),
    };
    let (pass, detail) = match r {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    SelftestResult {
        source,
        underfill,
        refill,
        pass,
        detail,
    }
}

/// Every source in both underfill modes, with and without refilling.
pub fn selftest_all(sources: &[Source]) -> Vec<SelftestResult> {
    let mut out = Vec::new();
    for &s in sources {
        for mode in [UnderfillMode::FallbackIndirect, UnderfillMode::NoPrediction] {
            for refill in [false, true] {
                out.push(selftest(s, mode, refill));
            }
        }
    }
    out
}
