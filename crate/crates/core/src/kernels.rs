//! Emission and execution of the native checksum kernels.
//!
//! Three shapes are generated, all sharing the same eight-instruction
//! checksum unit (combine, capture sign and parity, build the toggle mask,
//! patch an opcode field, advance the cursor):
//!
//! * **Static** — the minimal loop: one unit whose patch store targets its
//!   own combine opcode, a compare, and a conditional branch. Every
//!   iteration rewrites an instruction the pipeline already holds, which is
//!   exactly the behavior the fast variants are engineered away from.
//! * **Static unrolled** — a contiguous block of units, each patching its
//!   successor (the last wraps to the first), closed by one compare/branch
//!   per pass over the block.
//! * **Dynamic unrolled** — units packed to fill whole pages, each patching
//!   the unit at the same slot in the alternate page so no store ever hits
//!   the executing page. Units are emitted first with placeholder
//!   displacements to measure their size, then laid out and emitted for
//!   real. Pass termination is branch-free: a pre-applied patch replaces
//!   the cursor advance ahead of the exhaustion unit with a jump to the
//!   epilogue.
//!
//! Calling convention of the emitted code (System V):
//! static shapes are `fn(data, end, sum) -> sum`, the dynamic shape is
//! `fn(data, sum) -> sum` with the pass length fixed by the unit chain and
//! the termination patch.

use crate::cpu::CpuInfo;
use crate::exec::{page_size, ExecError, ExecRegion};
use crate::layout::{plan_layout, KernelLayout, LayoutError, PAGE_TAIL_JUMP_LEN};
use crate::oracle::{ChecksumState, OpSelector, OracleError};
use crate::x64::{
    arith_opcode, ArithField, Cc, CodeBuffer, Emitted, Instr, Reg64, Reg8, RelWidth, X64Error,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("native kernels require an x86-64 host")]
    UnsupportedHost,
    #[error("data length {0} is not a multiple of 8")]
    UnalignedData(usize),
    #[error("termination patch for {qwords} qwords exceeds the {total}-unit chain")]
    IterationOutOfRange { qwords: usize, total: usize },
    #[error("termination patching requires an unrolled kernel")]
    NotUnrolled,
    #[error("emitted code disagrees with the layout: {0}")]
    LayoutMismatch(String),
    #[error(transparent)]
    Encode(#[from] X64Error),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// Kernel shape selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelVariant {
    Static,
    StaticUnrolled { block_units: usize },
    DynamicUnrolled { page_count: usize },
}

pub const DEFAULT_BLOCK_UNITS: usize = 128;
pub const DEFAULT_PAGE_COUNT: usize = 2;

#[derive(Debug, Clone, Copy)]
pub struct KernelConfig {
    pub variant: KernelVariant,
    /// Selector baked into the canonical emission and restored by reset.
    pub init_op: OpSelector,
}

impl KernelConfig {
    pub fn static_kernel() -> Self {
        KernelConfig {
            variant: KernelVariant::Static,
            init_op: OpSelector::Add,
        }
    }

    pub fn static_unrolled(block_units: usize) -> Self {
        KernelConfig {
            variant: KernelVariant::StaticUnrolled { block_units },
            init_op: OpSelector::Add,
        }
    }

    pub fn dynamic(page_count: usize) -> Self {
        KernelConfig {
            variant: KernelVariant::DynamicUnrolled { page_count },
            init_op: OpSelector::Add,
        }
    }
}

type StaticEntry = extern "C" fn(*const u8, *const u8, u64) -> u64;
type DynamicEntry = extern "C" fn(*const u8, u64) -> u64;

/// Emit one checksum unit. The patch store targets `xor_target`, the
/// buffer-relative offset of some unit's mutable opcode byte.
fn emit_unit(
    buf: &mut CodeBuffer,
    cursor: Reg64,
    field: ArithField,
    xor_target: usize,
) -> Result<(), X64Error> {
    buf.emit(Instr::Arith { field, dst: Reg64::Rbx, src: cursor })?;
    buf.emit(Instr::SetCc { cc: Cc::S, dst: Reg8::Dl })?;
    buf.emit(Instr::SetCc { cc: Cc::P, dst: Reg8::Al })?;
    buf.emit(Instr::ShlImm { dst: Reg8::Al, imm: 2 })?;
    buf.emit(Instr::OrR8 { dst: Reg8::Dl, src: Reg8::Al })?;
    buf.emit(Instr::ShlImm { dst: Reg8::Dl, imm: 3 })?;
    buf.emit_xor_rip_to(xor_target, Reg8::Dl)?;
    buf.emit(Instr::Lea { dst: cursor, base: cursor, disp: 8 })?;
    Ok(())
}

fn emit_epilogue(buf: &mut CodeBuffer) -> Result<(), X64Error> {
    buf.emit(Instr::MovR64 { dst: Reg64::Rax, src: Reg64::Rbx })?;
    buf.emit(Instr::Pop(Reg64::Rbx))?;
    buf.emit(Instr::Ret)?;
    Ok(())
}

/// Length of one emitted unit, measured by a placeholder emission.
pub fn unit_len() -> usize {
    let mut buf = CodeBuffer::new();
    emit_unit(&mut buf, Reg64::Rcx, ArithField::new(2).unwrap(), 0).unwrap();
    buf.offset()
}

/// Length of the dynamic kernel's prologue, measured the same way.
pub fn dynamic_prologue_len() -> usize {
    let mut buf = CodeBuffer::new();
    emit_dynamic_prologue(&mut buf).unwrap();
    buf.offset()
}

fn emit_dynamic_prologue(buf: &mut CodeBuffer) -> Result<(), X64Error> {
    buf.emit(Instr::Push(Reg64::Rbx))?;
    buf.emit(Instr::MovR64 { dst: Reg64::Rbx, src: Reg64::Rsi })?;
    buf.emit(Instr::MovR64 { dst: Reg64::Rcx, src: Reg64::Rdi })?;
    buf.emit(Instr::Clc)?;
    Ok(())
}

/// Plan the page geometry of a dynamic kernel for this host's page size.
/// Pure arithmetic; usable on any host (the faithful emulation needs the
/// layout even where native execution is impossible).
pub fn plan_dynamic_layout(page_count: usize) -> Result<KernelLayout, KernelError> {
    Ok(plan_layout(page_size(), unit_len(), dynamic_prologue_len(), page_count)?)
}

/// Layout of a contiguous unrolled block (single modification "page").
pub fn plan_block_layout(block_units: usize) -> Result<KernelLayout, KernelError> {
    if block_units == 0 {
        return Err(KernelError::LayoutMismatch("block needs at least one unit".into()));
    }
    // push, mov, xchg, cmp, jle rel32, clc
    let prologue_len = 1 + 3 + 3 + 3 + 6 + 1;
    let ulen = unit_len();
    // compare + rel32 loop branch after the block
    let epilogue_offset = prologue_len + block_units * ulen + 3 + 6;
    Ok(KernelLayout::contiguous_block(
        block_units,
        ulen,
        prologue_len,
        epilogue_offset,
    ))
}

/// A generated kernel resident in RWX memory.
///
/// `&mut self` on execution and patching enforces the single-writer rule:
/// a kernel writes to its own instruction bytes, so exactly one thread may
/// run or regenerate it at a time.
#[derive(Debug)]
pub struct BuiltKernel {
    variant: KernelVariant,
    init_op: OpSelector,
    mem: ExecRegion,
    canonical: Vec<u8>,
    layout: Option<KernelLayout>,
    site_offsets: Vec<usize>,
    epilogue_offset: usize,
}

/// Saved bytes of an applied termination patch.
#[derive(Debug, Clone, Copy)]
pub struct TerminationPatch {
    offset: usize,
    saved: [u8; PAGE_TAIL_JUMP_LEN],
    applied: bool,
}

impl BuiltKernel {
    pub fn build(cfg: &KernelConfig) -> Result<Self, KernelError> {
        if !cfg!(target_arch = "x86_64") {
            return Err(KernelError::UnsupportedHost);
        }
        match cfg.variant {
            KernelVariant::Static => Self::build_static(cfg.init_op),
            KernelVariant::StaticUnrolled { block_units } => {
                let layout = plan_block_layout(block_units)?;
                Self::build_unrolled(cfg.init_op, layout, KernelVariant::StaticUnrolled { block_units })
            }
            KernelVariant::DynamicUnrolled { page_count } => {
                if page_count < 2 {
                    return Err(KernelError::LayoutMismatch(
                        "dynamic kernels need at least two pages".into(),
                    ));
                }
                let layout = plan_dynamic_layout(page_count)?;
                Self::build_with_layout(cfg.init_op, layout)
            }
        }
    }

    /// Build a dynamic kernel against an externally planned layout.
    pub fn build_with_layout(init_op: OpSelector, layout: KernelLayout) -> Result<Self, KernelError> {
        if layout.page_count < 2 {
            return Err(KernelError::LayoutMismatch(
                "dynamic kernels need at least two pages".into(),
            ));
        }
        let measured = unit_len();
        if measured != layout.unit_len {
            return Err(KernelError::LayoutMismatch(format!(
                "layout unit length {} but units measure {}",
                layout.unit_len, measured
            )));
        }
        let variant = KernelVariant::DynamicUnrolled { page_count: layout.page_count };
        Self::build_unrolled(init_op, layout, variant)
    }

    fn build_static(init_op: OpSelector) -> Result<Self, KernelError> {
        let mut buf = CodeBuffer::new();
        let done = buf.new_label();
        let top = buf.new_label();

        buf.emit(Instr::Push(Reg64::Rbx))?;
        buf.emit(Instr::MovR64 { dst: Reg64::Rbx, src: Reg64::Rdx })?;
        // Arguments arrive as (data=rdi, end=rsi); the loop wants the
        // cursor in rsi and the end in rdi.
        buf.emit(Instr::Xchg { a: Reg64::Rsi, b: Reg64::Rdi })?;
        buf.emit(Instr::CmpR64 { left: Reg64::Rdi, right: Reg64::Rsi })?;
        buf.emit_jcc(Cc::Le, RelWidth::Rel8, done)?;
        buf.emit(Instr::Clc)?;

        buf.bind_label(top)?;
        let unit_start = buf.offset();
        let site = unit_start + 1;
        let field = ArithField::new(init_op.field())?;
        buf.emit(Instr::Arith { field, dst: Reg64::Rbx, src: Reg64::Rsi })?;
        buf.emit(Instr::SetCc { cc: Cc::S, dst: Reg8::Dl })?;
        buf.emit(Instr::SetCc { cc: Cc::P, dst: Reg8::Al })?;
        buf.emit(Instr::ShlImm { dst: Reg8::Al, imm: 2 })?;
        buf.emit(Instr::OrR8 { dst: Reg8::Dl, src: Reg8::Al })?;
        buf.emit(Instr::ShlImm { dst: Reg8::Dl, imm: 3 })?;
        let xor_at = buf.emit_xor_rip_to(site, Reg8::Dl)?;
        buf.emit(Instr::Lea { dst: Reg64::Rsi, base: Reg64::Rsi, disp: 8 })?;
        buf.emit(Instr::CmpR64 { left: Reg64::Rdi, right: Reg64::Rsi })?;
        buf.emit_jcc(Cc::G, RelWidth::Rel8, top)?;

        buf.bind_label(done)?;
        let epilogue_offset = buf.offset();
        emit_epilogue(&mut buf)?;

        // The patch store's backward reach must equal the emitted bytes
        // between the opcode byte and the end of the store: the combine
        // tail plus the five intervening instructions plus the store
        // itself.
        let between = 2 + 3 + 3 + 3 + 2 + 3;
        debug_assert_eq!(xor_at, site + between);

        assert_carry_discipline(buf.trace());
        let canonical = buf.into_bytes()?;
        let disp = i32::from_le_bytes(canonical[xor_at + 2..xor_at + 6].try_into().unwrap());
        assert_eq!(disp, -((between + 6) as i32));

        let mut mem = ExecRegion::alloc(canonical.len())?;
        mem.write(0, &canonical);
        mem.sync_icache();
        Ok(BuiltKernel {
            variant: KernelVariant::Static,
            init_op,
            mem,
            canonical,
            layout: None,
            site_offsets: vec![site],
            epilogue_offset,
        })
    }

    fn build_unrolled(
        init_op: OpSelector,
        layout: KernelLayout,
        variant: KernelVariant,
    ) -> Result<Self, KernelError> {
        let field = ArithField::new(init_op.field())?;
        let mut buf = CodeBuffer::new();
        let epilogue = buf.new_label();

        match variant {
            KernelVariant::StaticUnrolled { .. } => {
                let top = buf.new_label();
                buf.emit(Instr::Push(Reg64::Rbx))?;
                buf.emit(Instr::MovR64 { dst: Reg64::Rbx, src: Reg64::Rdx })?;
                buf.emit(Instr::Xchg { a: Reg64::Rsi, b: Reg64::Rdi })?;
                buf.emit(Instr::CmpR64 { left: Reg64::Rdi, right: Reg64::Rsi })?;
                buf.emit_jcc(Cc::Le, RelWidth::Rel32, epilogue)?;
                buf.emit(Instr::Clc)?;
                if buf.offset() != layout.prologue_len {
                    return Err(KernelError::LayoutMismatch(format!(
                        "prologue measures {} bytes, layout says {}",
                        buf.offset(),
                        layout.prologue_len
                    )));
                }

                buf.bind_label(top)?;
                let total = layout.total_units();
                for unit in 0..total {
                    if buf.offset() != layout.unit_offset(unit) {
                        return Err(KernelError::LayoutMismatch(format!(
                            "unit {unit} starts at {} instead of {}",
                            buf.offset(),
                            layout.unit_offset(unit)
                        )));
                    }
                    let target = layout.site_offsets[layout.partner(unit)];
                    emit_unit(&mut buf, Reg64::Rsi, field, target)?;
                }
                buf.emit(Instr::CmpR64 { left: Reg64::Rdi, right: Reg64::Rsi })?;
                buf.emit_jcc(Cc::G, RelWidth::Rel32, top)?;
                buf.bind_label(epilogue)?;
            }
            KernelVariant::DynamicUnrolled { .. } => {
                let page_entries: Vec<_> = (0..layout.page_count).map(|_| buf.new_label()).collect();

                emit_dynamic_prologue(&mut buf)?;
                if buf.offset() != layout.prologue_len {
                    return Err(KernelError::LayoutMismatch(format!(
                        "prologue measures {} bytes, layout says {}",
                        buf.offset(),
                        layout.prologue_len
                    )));
                }

                for page in 0..layout.page_count {
                    // Pages after the first keep the prologue-sized lead-in
                    // as dead padding so the unit grids line up.
                    buf.pad_to(page * layout.page_size + layout.prologue_len, 0xCC);
                    buf.bind_label(page_entries[page])?;
                    for slot in 0..layout.units_per_page {
                        let unit = page * layout.units_per_page + slot;
                        if buf.offset() != layout.unit_offset(unit) {
                            return Err(KernelError::LayoutMismatch(format!(
                                "unit {unit} starts at {} instead of {}",
                                buf.offset(),
                                layout.unit_offset(unit)
                            )));
                        }
                        let target = layout.site_offsets[layout.partner(unit)];
                        emit_unit(&mut buf, Reg64::Rcx, field, target)?;
                    }
                    buf.pad_to(layout.page_tail_offset(page), 0xCC);
                    let next = if page + 1 < layout.page_count {
                        page_entries[page + 1]
                    } else {
                        epilogue
                    };
                    buf.emit_jmp(RelWidth::Rel32, next)?;
                }
                buf.pad_to(layout.epilogue_offset, 0xCC);
                buf.bind_label(epilogue)?;
            }
            KernelVariant::Static => unreachable!("static kernels use build_static"),
        }

        let epilogue_offset = buf.offset();
        if epilogue_offset != layout.epilogue_offset {
            return Err(KernelError::LayoutMismatch(format!(
                "epilogue at {} instead of {}",
                epilogue_offset, layout.epilogue_offset
            )));
        }
        emit_epilogue(&mut buf)?;

        assert_carry_discipline(buf.trace());
        let canonical = buf.into_bytes()?;

        // Every patch store must land on its partner's opcode byte.
        for unit in 0..layout.total_units() {
            let xor_start = layout.unit_offset(unit) + 17;
            debug_assert_eq!(canonical[xor_start], 0x30);
            let disp =
                i32::from_le_bytes(canonical[xor_start + 2..xor_start + 6].try_into().unwrap());
            let target = (xor_start as i64 + 6 + disp as i64) as usize;
            assert_eq!(target, layout.site_offsets[layout.partner(unit)]);
        }

        let mut mem = ExecRegion::alloc(canonical.len())?;
        mem.write(0, &canonical);
        mem.sync_icache();
        Ok(BuiltKernel {
            variant,
            init_op,
            mem,
            canonical,
            site_offsets: layout.site_offsets.clone(),
            layout: Some(layout),
            epilogue_offset,
        })
    }

    pub fn variant(&self) -> KernelVariant {
        self.variant
    }

    /// Selector baked into the canonical emission.
    pub fn canonical_op(&self) -> OpSelector {
        self.init_op
    }

    pub fn layout(&self) -> Option<&KernelLayout> {
        self.layout.as_ref()
    }

    pub fn site_offsets(&self) -> &[usize] {
        &self.site_offsets
    }

    pub fn canonical_bytes(&self) -> &[u8] {
        &self.canonical
    }

    pub fn current_bytes(&self) -> &[u8] {
        &self.mem.as_slice()[..self.canonical.len()]
    }

    /// Address range of the kernel's executable buffer.
    pub fn buffer_range(&self) -> (usize, usize) {
        (self.mem.base() as usize, self.canonical.len())
    }

    /// Restore the canonical emission with every opcode field set to `op`
    /// (termination patches disappear with the restore).
    pub fn reset(&mut self, op: OpSelector) {
        let len = self.canonical.len();
        self.mem.as_mut_slice()[..len].copy_from_slice(&self.canonical);
        let byte = arith_opcode(ArithField::new(op.field()).expect("selector fields are 3-bit"));
        for &site in &self.site_offsets {
            self.mem.as_mut_slice()[site] = byte;
        }
        self.mem.sync_icache();
    }

    /// Current selector of every unit, read back from the live opcode
    /// fields. Fails if the bytes no longer decode (buffer tampering).
    pub fn selectors(&self) -> Result<Vec<OpSelector>, KernelError> {
        self.site_offsets
            .iter()
            .map(|&site| {
                let field = crate::x64::decode_field(self.mem.as_slice()[site])?;
                Ok(OpSelector::from_field(field.value())?)
            })
            .collect()
    }

    /// Apply the branch-free termination patch so one pass processes
    /// exactly `qwords` data words.
    ///
    /// The patch replaces the cursor advance ahead of the exhaustion unit
    /// (for a page-aligned exhaustion point, the page-tail jump) with a
    /// jump to the epilogue. The patched bytes never include an opcode
    /// field another unit could toggle mid-pass, so a single pre-applied
    /// patch stays intact for the whole pass.
    pub fn apply_termination_patch(&mut self, qwords: usize) -> Result<TerminationPatch, KernelError> {
        let layout = self.layout.as_ref().ok_or(KernelError::NotUnrolled)?;
        let total = layout.total_units();
        if qwords > total {
            return Err(KernelError::IterationOutOfRange { qwords, total });
        }
        if qwords == total {
            // Natural fall-through; nothing to patch.
            return Ok(TerminationPatch { offset: 0, saved: [0; 5], applied: false });
        }
        let offset = if qwords == 0 {
            // Nothing may run: overwrite the first unit's head. Safe
            // because no unit executes before the jump.
            layout.unit_offset(0)
        } else if layout.page_count > 1 && qwords.is_multiple_of(layout.units_per_page) {
            layout.page_tail_offset(qwords / layout.units_per_page - 1)
        } else {
            layout.unit_offset(qwords) - 4
        };
        let disp = self.epilogue_offset as i64 - (offset as i64 + 5);
        let disp = i32::try_from(disp).map_err(|_| X64Error::DisplacementOutOfRange {
            disp,
            width: RelWidth::Rel32,
        })?;
        let mut saved = [0u8; 5];
        saved.copy_from_slice(&self.mem.as_slice()[offset..offset + 5]);
        let mut patch = [0u8; 5];
        patch[0] = 0xE9;
        patch[1..5].copy_from_slice(&disp.to_le_bytes());
        self.mem.write(offset, &patch);
        self.mem.sync_icache();
        Ok(TerminationPatch { offset, saved, applied: true })
    }

    /// Undo a termination patch, restoring the saved bytes.
    pub fn revert_termination_patch(&mut self, patch: TerminationPatch) {
        if patch.applied {
            self.mem.write(patch.offset, &patch.saved);
            self.mem.sync_icache();
        }
    }

    /// Execute the kernel over `len` bytes at `data` starting from the live
    /// opcode-field state, returning the final sum. Unrolled kernels
    /// process the data in whole-chain passes plus one patched remainder
    /// pass.
    ///
    /// # Safety
    ///
    /// `data..data+len` must be readable for the duration of the call. The
    /// range may alias this kernel's own buffer (the introspective case);
    /// that is why the entry point is raw rather than slice-based.
    pub unsafe fn execute_raw(
        &mut self,
        data: *const u8,
        len: usize,
        init_sum: u64,
    ) -> Result<u64, KernelError> {
        if !len.is_multiple_of(8) {
            return Err(KernelError::UnalignedData(len));
        }
        let qwords = len / 8;
        if qwords == 0 {
            return Ok(init_sum);
        }
        match self.variant {
            KernelVariant::Static => {
                let entry: StaticEntry = std::mem::transmute(self.mem.base());
                Ok(entry(data, data.add(len), init_sum))
            }
            KernelVariant::StaticUnrolled { .. } | KernelVariant::DynamicUnrolled { .. } => {
                let layout = self.layout.as_ref().ok_or(KernelError::NotUnrolled)?;
                let total = layout.total_units();
                let full_passes = qwords / total;
                let remainder = qwords % total;
                let dynamic = matches!(self.variant, KernelVariant::DynamicUnrolled { .. });
                let base = self.mem.base();
                let mut sum = init_sum;
                let mut cursor = data;

                if full_passes > 0 {
                    if dynamic {
                        let entry: DynamicEntry = std::mem::transmute(base);
                        for _ in 0..full_passes {
                            sum = entry(cursor, sum);
                            cursor = cursor.add(total * 8);
                        }
                    } else {
                        let entry: StaticEntry = std::mem::transmute(base);
                        let end = cursor.add(full_passes * total * 8);
                        sum = entry(cursor, end, sum);
                        cursor = end;
                    }
                }
                if remainder > 0 {
                    let patch = self.apply_termination_patch(remainder)?;
                    if dynamic {
                        let entry: DynamicEntry = std::mem::transmute(base);
                        sum = entry(cursor, sum);
                    } else {
                        let entry: StaticEntry = std::mem::transmute(base);
                        let end = cursor.add(remainder * 8);
                        sum = entry(cursor, end, sum);
                    }
                    self.revert_termination_patch(patch);
                }
                Ok(sum)
            }
        }
    }

    /// [`Self::execute_raw`] over a slice that must not alias the kernel
    /// buffer.
    pub fn execute(&mut self, data: &[u8], init_sum: u64) -> Result<u64, KernelError> {
        self.debug_assert_disjoint(data);
        unsafe { self.execute_raw(data.as_ptr(), data.len(), init_sum) }
    }

    /// Reset to `init.op`, execute, and return the final state in the same
    /// form the reference emulation reports.
    ///
    /// # Safety
    ///
    /// Same contract as [`Self::execute_raw`].
    pub unsafe fn run_raw(
        &mut self,
        data: *const u8,
        len: usize,
        init: ChecksumState,
    ) -> Result<ChecksumState, KernelError> {
        self.reset(init.op);
        let sum = self.execute_raw(data, len, init.sum)?;
        let qwords = len / 8;
        let op = match self.variant {
            KernelVariant::Static => {
                let field = crate::x64::decode_field(self.mem.as_slice()[self.site_offsets[0]])?;
                OpSelector::from_field(field.value())?
            }
            _ => {
                let selectors = self.selectors()?;
                selectors[qwords % selectors.len()]
            }
        };
        Ok(ChecksumState { sum, op, cursor: len })
    }

    /// [`Self::run_raw`] over a slice that must not alias the kernel
    /// buffer.
    pub fn run(&mut self, data: &[u8], init: ChecksumState) -> Result<ChecksumState, KernelError> {
        self.debug_assert_disjoint(data);
        unsafe { self.run_raw(data.as_ptr(), data.len(), init) }
    }

    fn debug_assert_disjoint(&self, data: &[u8]) {
        if cfg!(debug_assertions) && !data.is_empty() {
            let (base, len) = self.buffer_range();
            let d = data.as_ptr() as usize;
            assert!(
                d + data.len() <= base || base + len <= d,
                "slice aliases the kernel buffer; use the raw entry points"
            );
        }
    }
}

/// Carry discipline: every combine instruction must be dominated by a
/// clear-carry guarantee. In the emitted (linear) order that predecessor is
/// the prologue `clc`, the previous unit's patch store, or the loop
/// compare; the loop back-edges re-enter behind a compare whose taken
/// condition implies no borrow, so the linear check covers the runtime
/// paths as well.
fn assert_carry_discipline(trace: &[(usize, Emitted)]) {
    let mut last_writer: Option<Emitted> = None;
    for &(offset, emitted) in trace {
        if matches!(emitted, Emitted::Arith(_)) {
            match last_writer {
                Some(w) if w.guarantees_clear_carry() => {}
                other => panic!("combine at {offset} follows {other:?}, carry state unknown"),
            }
        }
        if !emitted.flag_transparent() {
            last_writer = Some(emitted);
        }
    }
}

/// Host and layout report, one detail per line.
pub fn layout_report(
    layout: &KernelLayout,
    cpu: &CpuInfo,
    code_base: usize,
    code_size: usize,
) -> String {
    let mut out = String::new();
    out.push_str(&format!("Manufacturer: {}\n", cpu.manufacturer));
    out.push_str(&format!(
        "DisplayModel: 0x{:X} DisplayFamily: 0x{:X}\n",
        cpu.display_model, cpu.display_family
    ));
    out.push_str(&format!(
        "Architecture Performance Monitoring Version: {} Number of Performance Counters per Logical Processor: {} PMC bit width: {}\n",
        cpu.pmc_version, cpu.pmc_count, cpu.pmc_width
    ));
    out.push_str(&format!(
        "The page size for this system is {} bytes.\n",
        cpu.page_size
    ));
    out.push_str(&format!(
        "Code segment base: 0x{:X} size: 0x{:X} End address: 0x{:X}\n",
        code_base,
        code_size,
        code_base + code_size
    ));
    out.push_str(&format!(
        "Number of pages: {} Unrolled loop size per page: {} Intro bytes: 0x{:X} Code size: 0x{:X}\n",
        layout.page_count, layout.units_per_page, layout.prologue_len, layout.unit_len
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{checksum_region, emulate_unrolled, ChecksumState, Region};

    fn qwords(vals: &[u64]) -> Vec<u8> {
        vals.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn unit_measures_27_bytes() {
        assert_eq!(unit_len(), 0x1B);
    }

    #[test]
    fn static_kernel_shape() {
        let kernel = BuiltKernel::build(&KernelConfig::static_kernel()).unwrap();
        let bytes = kernel.canonical_bytes();
        // Loop head: adc rbx, [rsi] with the canonical field.
        let site = kernel.site_offsets()[0];
        assert_eq!(bytes[site - 1], 0x48);
        assert_eq!(bytes[site], 0x13);
        assert_eq!(bytes[site + 1], 0x1E);
        // Patch store reaches back over the five instructions plus the
        // combine tail, measured from its own end.
        let xor_start = site + 16;
        assert_eq!(bytes[xor_start], 0x30);
        assert_eq!(bytes[xor_start + 1], 0x15);
        let disp = i32::from_le_bytes(bytes[xor_start + 2..xor_start + 6].try_into().unwrap());
        assert_eq!(disp, -22);
    }

    #[test]
    fn emission_is_deterministic() {
        for cfg in [
            KernelConfig::static_kernel(),
            KernelConfig::static_unrolled(8),
            KernelConfig::dynamic(2),
        ] {
            let a = BuiltKernel::build(&cfg).unwrap();
            let b = BuiltKernel::build(&cfg).unwrap();
            assert_eq!(a.canonical_bytes(), b.canonical_bytes());
        }
    }

    #[test]
    fn static_kernel_matches_single_site_semantics() {
        let mut kernel = BuiltKernel::build(&KernelConfig::static_kernel()).unwrap();
        let data = qwords(&[1, 2, 3, 0x8000_0000_0000_0000, 77, u64::MAX]);
        let region = Region::new(&data).unwrap();
        for op in OpSelector::ALL {
            let init = ChecksumState::new(12345, op);
            let expect = checksum_region(region, None, init);
            let got = kernel.run(&data, init).unwrap();
            assert_eq!(got, expect, "init {op:?}");
        }
    }

    #[test]
    fn static_kernel_single_iteration() {
        let mut kernel = BuiltKernel::build(&KernelConfig::static_kernel()).unwrap();
        let data = qwords(&[42]);
        let got = kernel.run(&data, ChecksumState::default()).unwrap();
        assert_eq!(got.sum, 42);
        assert_eq!(got.cursor, 8);
    }

    #[test]
    fn static_kernel_empty_region() {
        let mut kernel = BuiltKernel::build(&KernelConfig::static_kernel()).unwrap();
        let init = ChecksumState::new(9, OpSelector::Xor);
        let got = kernel.run(&[], init).unwrap();
        assert_eq!(got.sum, 9);
        assert_eq!(got.op, OpSelector::Xor);
    }

    #[test]
    fn unrolled_block_matches_multi_site_semantics() {
        let mut kernel = BuiltKernel::build(&KernelConfig::static_unrolled(4)).unwrap();
        let layout = kernel.layout().unwrap().clone();
        // 11 qwords: two full passes plus a three-unit remainder.
        let data = qwords(&[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11]);
        let region = Region::new(&data).unwrap();
        for op in OpSelector::ALL {
            let init = ChecksumState::new(7, op);
            let expect = emulate_unrolled(region, &layout, init).unwrap();
            let got = kernel.run(&data, init).unwrap();
            assert_eq!(got, expect.state, "init {op:?}");
            assert_eq!(kernel.selectors().unwrap(), expect.selectors, "init {op:?}");
        }
    }

    #[test]
    fn dynamic_kernel_matches_multi_site_semantics() {
        let mut kernel = BuiltKernel::build(&KernelConfig::dynamic(2)).unwrap();
        let layout = kernel.layout().unwrap().clone();
        let total = layout.total_units();
        // Cover: partial first page, exact page, page boundary + 1, full
        // chain, full chain + remainder spanning both pages.
        let sizes = [
            1,
            5,
            layout.units_per_page - 1,
            layout.units_per_page,
            layout.units_per_page + 1,
            total - 1,
            total,
            total + 3,
            2 * total + layout.units_per_page + 7,
        ];
        for qcount in sizes {
            let data: Vec<u8> = qwords(&(0..qcount as u64).map(|i| i.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(i as u32 % 64)).collect::<Vec<_>>());
            let region = Region::new(&data).unwrap();
            let init = ChecksumState::new(3, OpSelector::Add);
            let expect = emulate_unrolled(region, &layout, init).unwrap();
            let got = kernel.run(&data, init).unwrap();
            assert_eq!(got, expect.state, "qwords {qcount}");
            assert_eq!(kernel.selectors().unwrap(), expect.selectors, "qwords {qcount}");
        }
    }

    #[test]
    fn minimal_two_unit_dynamic_matches_emulation() {
        // One unit per page: the smallest layout that still pairs across
        // pages.
        let prologue_len = dynamic_prologue_len();
        let page = page_size();
        let layout = KernelLayout {
            page_size: page,
            page_count: 2,
            prologue_len,
            unit_len: unit_len(),
            units_per_page: 1,
            epilogue_offset: 2 * page,
            site_offsets: vec![prologue_len + 1, page + prologue_len + 1],
        };
        let mut kernel = BuiltKernel::build_with_layout(OpSelector::Add, layout.clone()).unwrap();
        let data = qwords(&[11, 22, 33, 44, 55, 66, 77]);
        let region = Region::new(&data).unwrap();
        for op in OpSelector::ALL {
            let init = ChecksumState::new(5, op);
            let expect = emulate_unrolled(region, &layout, init).unwrap();
            let got = kernel.run(&data, init).unwrap();
            assert_eq!(got, expect.state, "init {op:?}");
        }
    }

    #[test]
    fn dynamic_sites_mirror_across_pages() {
        let kernel = BuiltKernel::build(&KernelConfig::dynamic(2)).unwrap();
        let layout = kernel.layout().unwrap();
        for unit in 0..layout.total_units() {
            let own_page = layout.site_offsets[unit] / layout.page_size;
            let partner_page = layout.site_offsets[layout.partner(unit)] / layout.page_size;
            assert_ne!(own_page, partner_page);
        }
    }

    #[test]
    fn reset_restores_canonical_bytes() {
        let mut kernel = BuiltKernel::build(&KernelConfig::dynamic(2)).unwrap();
        let data = qwords(&(0..600u64).collect::<Vec<_>>());
        kernel.run(&data, ChecksumState::default()).unwrap();
        assert_ne!(kernel.current_bytes(), kernel.canonical_bytes());
        kernel.reset(OpSelector::Add);
        assert_eq!(kernel.current_bytes(), kernel.canonical_bytes());
        // Idempotent.
        kernel.reset(OpSelector::Add);
        assert_eq!(kernel.current_bytes(), kernel.canonical_bytes());
    }

    #[test]
    fn termination_patch_bounds() {
        let mut kernel = BuiltKernel::build(&KernelConfig::static_unrolled(4)).unwrap();
        assert!(matches!(
            kernel.apply_termination_patch(5),
            Err(KernelError::IterationOutOfRange { qwords: 5, total: 4 })
        ));
        // Zero iterations: the chain head is patched and a pass returns the
        // initial state untouched.
        let patch = kernel.apply_termination_patch(0).unwrap();
        let entry: StaticEntry = unsafe { std::mem::transmute(kernel.mem.base()) };
        let data = qwords(&[1, 2, 3, 4]);
        let end = unsafe { data.as_ptr().add(8) };
        assert_eq!(entry(data.as_ptr(), end, 55), 55);
        kernel.revert_termination_patch(patch);
        assert_eq!(kernel.current_bytes(), kernel.canonical_bytes());

        let mut stat = BuiltKernel::build(&KernelConfig::static_kernel()).unwrap();
        assert!(matches!(
            stat.apply_termination_patch(1),
            Err(KernelError::NotUnrolled)
        ));
    }

    #[test]
    fn termination_sweep_matches_emulation() {
        let mut kernel = BuiltKernel::build(&KernelConfig::static_unrolled(6)).unwrap();
        let layout = kernel.layout().unwrap().clone();
        let all: Vec<u64> = (0..24u64).map(|i| i.wrapping_mul(0xDEAD_BEEF_CAFE_F00D)).collect();
        for k in 0..=all.len() {
            let data = qwords(&all[..k]);
            let region = Region::new(&data).unwrap();
            let expect = emulate_unrolled(region, &layout, ChecksumState::default()).unwrap();
            let got = kernel.run(&data, ChecksumState::default()).unwrap();
            assert_eq!(got, expect.state, "k = {k}");
        }
    }

    #[test]
    fn unaligned_data_rejected() {
        let mut kernel = BuiltKernel::build(&KernelConfig::static_kernel()).unwrap();
        assert!(matches!(
            kernel.execute(&[0u8; 7], 0),
            Err(KernelError::UnalignedData(7))
        ));
    }

    #[test]
    fn layout_report_shape() {
        let layout = plan_dynamic_layout(2).unwrap();
        let cpu = crate::cpu::detect();
        let report = layout_report(&layout, &cpu, 0x7F00_0000, 0x8200);
        assert!(report.contains(&format!(
            "The page size for this system is {} bytes.",
            page_size()
        )));
        assert!(report.contains("PMC bit width: "));
        assert!(report.contains("Number of pages: 2"));
        assert!(report.contains("size: 0x8200"));
        if page_size() == 4096 {
            // (4096 - 8 prologue - 5 tail) / 27 = 151 units per page.
            assert!(report.contains("Unrolled loop size per page: 151"));
        }
    }

    #[test]
    fn mismatched_layout_rejected() {
        let bad = plan_layout(page_size(), 26, dynamic_prologue_len(), 2).unwrap();
        assert!(matches!(
            BuiltKernel::build_with_layout(OpSelector::Add, bad),
            Err(KernelError::LayoutMismatch(_))
        ));
    }
}
