//! Portable reference semantics for the self-patching checksum kernels.
//!
//! Every native kernel in this crate walks a byte region one qword at a
//! time, combines each qword into a running sum with an arithmetic
//! operation selected by a 3-bit opcode field, and then toggles two bits of
//! that field based on the sign and low-byte parity of the result. This
//! module reproduces those semantics exactly, without executing or
//! generating any machine code, so it runs on any host and serves as the
//! correctness oracle for the native kernels.
//!
//! Two emulation strategies are provided:
//!
//! * [`checksum_region`] models a kernel with a single modification site —
//!   the selector is one value that evolves every step.
//! * [`emulate_unrolled`] models an unrolled kernel where every unit owns
//!   its own opcode field and each step toggles a *different* unit's field.
//!   It tracks all fields individually and checks every data read against
//!   the full site table, which makes it deliberately expensive: it is the
//!   faithful non-self-modifying competitor that the benchmarks compare
//!   against.

use crate::layout::KernelLayout;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OracleError {
    /// Region lengths must be qword-aligned; padding would make the native
    /// and emulated traversals diverge.
    #[error("region length {0} is not a multiple of 8")]
    UnalignedRegion(usize),
    /// Selector values live in {0, 1, 4, 5}: bit 1 is owned by the opcode
    /// field encoding and is never part of the mutable state.
    #[error("invalid operation selector {0:#x} (expected one of 0, 1, 4, 5)")]
    InvalidSelector(u8),
    /// A modification site must address the 3-bit field of an opcode byte.
    #[error("site bit offset {0} does not land on bits [3:5] of a byte")]
    MisalignedSite(u32),
    #[error("layout does not describe this emulation: {0}")]
    LayoutMismatch(String),
}

/// The arithmetic operation a checksum step applies, as stored in the two
/// mutable bits of the kernel's opcode field.
///
/// The in-memory opcode field is `selector | 2`; bit 1 is fixed by the
/// instruction family and only bits 0 and 2 ever change.
#[repr(u8)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpSelector {
    /// Wrapping add (add-with-carry executed with the carry flag clear).
    Add = 0,
    /// Wrapping subtract (subtract-with-borrow, borrow clear).
    Sub = 1,
    /// Bitwise exclusive or.
    Xor = 4,
    /// Compare: the subtraction result drives the toggles but the sum is
    /// left untouched.
    Cmp = 5,
}

impl OpSelector {
    pub const ALL: [OpSelector; 4] = [
        OpSelector::Add,
        OpSelector::Sub,
        OpSelector::Xor,
        OpSelector::Cmp,
    ];

    pub fn from_bits(bits: u8) -> Result<Self, OracleError> {
        match bits {
            0 => Ok(OpSelector::Add),
            1 => Ok(OpSelector::Sub),
            4 => Ok(OpSelector::Xor),
            5 => Ok(OpSelector::Cmp),
            other => Err(OracleError::InvalidSelector(other)),
        }
    }

    pub fn bits(self) -> u8 {
        self as u8
    }

    /// The 3-bit opcode field value that encodes this selector.
    pub fn field(self) -> u8 {
        self.bits() | 2
    }

    /// Recover a selector from an opcode field read out of kernel memory.
    pub fn from_field(field: u8) -> Result<Self, OracleError> {
        if field & 2 == 0 || field > 7 {
            return Err(OracleError::InvalidSelector(field));
        }
        Self::from_bits(field & 0b101)
    }

    /// Apply a toggle mask to bits 0 and 2. Masks produced by [`step`] are
    /// themselves in {0, 1, 4, 5}, so the selector set is closed under this.
    fn toggled(self, mask: u8) -> Self {
        debug_assert_eq!(mask & !0b101, 0);
        Self::from_bits(self.bits() ^ mask).expect("toggle preserves the selector set")
    }
}

/// Parity of the low byte as the hardware parity flag reports it: true when
/// the number of set bits is even.
pub fn parity8(byte: u8) -> bool {
    byte.count_ones().is_multiple_of(2)
}

/// Running state of a checksum traversal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChecksumState {
    pub sum: u64,
    pub op: OpSelector,
    /// Byte offset of the next qword to read; always a multiple of 8.
    pub cursor: usize,
}

impl ChecksumState {
    pub fn new(sum: u64, op: OpSelector) -> Self {
        ChecksumState { sum, op, cursor: 0 }
    }

    /// Canonical reset state: zero sum, selector 0, cursor at the start.
    pub fn reset(op: OpSelector) -> Self {
        ChecksumState::new(0, op)
    }
}

impl Default for ChecksumState {
    fn default() -> Self {
        ChecksumState::new(0, OpSelector::Add)
    }
}

/// Location of the mutable opcode field within a protected region.
///
/// `qword_offset` addresses the 8-byte word holding the opcode byte and
/// `bit_offset` the position of the 3-bit field inside that word. The field
/// always occupies bits `[3:5]` of its byte, so `bit_offset % 8 == 3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModificationSite {
    qword_offset: usize,
    bit_offset: u32,
}

impl ModificationSite {
    pub fn new(qword_offset: usize, bit_offset: u32) -> Result<Self, OracleError> {
        if bit_offset % 8 != 3 || bit_offset > 63 {
            return Err(OracleError::MisalignedSite(bit_offset));
        }
        if !qword_offset.is_multiple_of(8) {
            return Err(OracleError::UnalignedRegion(qword_offset));
        }
        Ok(ModificationSite {
            qword_offset,
            bit_offset,
        })
    }

    /// Build the site for a mutable opcode byte at `byte_offset` within the
    /// region.
    pub fn for_byte_offset(byte_offset: usize) -> Self {
        ModificationSite {
            qword_offset: byte_offset & !7,
            bit_offset: ((byte_offset & 7) * 8 + 3) as u32,
        }
    }

    pub fn qword_offset(&self) -> usize {
        self.qword_offset
    }

    pub fn bit_offset(&self) -> u32 {
        self.bit_offset
    }

    /// Mask that keeps everything except the two mutable field bits.
    pub fn preserve_mask(&self) -> u64 {
        !(5u64 << self.bit_offset)
    }

    /// Replace the mutable field bits of `qword` with `op`. Bit 1 of the
    /// field is read from memory, not from the selector.
    pub fn substitute(&self, qword: u64, op: OpSelector) -> u64 {
        (qword & self.preserve_mask()) | ((op.bits() as u64) << self.bit_offset)
    }
}

/// A validated view of the bytes a kernel checksums.
#[derive(Debug, Clone, Copy)]
pub struct Region<'a> {
    bytes: &'a [u8],
}

impl<'a> Region<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self, OracleError> {
        if !bytes.len().is_multiple_of(8) {
            return Err(OracleError::UnalignedRegion(bytes.len()));
        }
        Ok(Region { bytes })
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn qword_count(&self) -> usize {
        self.bytes.len() / 8
    }

    pub fn bytes(&self) -> &'a [u8] {
        self.bytes
    }

    /// Little-endian qword at byte offset `offset` (must be 8-aligned).
    pub fn qword_at(&self, offset: usize) -> u64 {
        let b: [u8; 8] = self.bytes[offset..offset + 8].try_into().unwrap();
        u64::from_le_bytes(b)
    }
}

/// One checksum step: combine `qword` into the sum under the current
/// selector, then toggle selector bit 2 with the parity of the low result
/// byte and bit 0 with the sign bit of the result.
pub fn step(state: ChecksumState, qword: u64) -> ChecksumState {
    let mut sum = state.sum;
    let res = match state.op {
        OpSelector::Add => {
            sum = sum.wrapping_add(qword);
            sum
        }
        OpSelector::Sub => {
            sum = sum.wrapping_sub(qword);
            sum
        }
        OpSelector::Xor => {
            sum ^= qword;
            sum
        }
        OpSelector::Cmp => state.sum.wrapping_sub(qword),
    };
    let toggle = ((parity8(res as u8) as u8) << 2) | ((res >> 63) as u8);
    ChecksumState {
        sum,
        op: state.op.toggled(toggle),
        cursor: state.cursor + 8,
    }
}

/// Checksum a region under single-site semantics.
///
/// When the cursor reaches `site`'s qword, the value read is the raw memory
/// word with the current selector substituted into the mutable field bits —
/// the kernel reading the byte it keeps patching. A site whose qword lies
/// beyond the region is treated as absent.
pub fn checksum_region(
    region: Region<'_>,
    site: Option<ModificationSite>,
    init: ChecksumState,
) -> ChecksumState {
    let mut state = init;
    let mut offset = 0;
    while offset < region.len() {
        let mut data = region.qword_at(offset);
        if let Some(site) = site {
            if site.qword_offset() == state.cursor {
                data = site.substitute(data, state.op);
            }
        }
        state = step(state, data);
        offset += 8;
    }
    state
}

/// Closure of `init` under the two field-bit toggles.
///
/// Every valid selector reaches the full set {0, 1, 4, 5}; the function
/// computes the closure rather than assuming it so the algebra stays
/// checkable.
pub fn reachable_ops(init: u8) -> Result<Vec<OpSelector>, OracleError> {
    let start = OpSelector::from_bits(init)?;
    let mut seen = vec![start];
    let mut frontier = vec![start];
    while let Some(op) = frontier.pop() {
        for toggle in [0b001u8, 0b100u8] {
            let next = op.toggled(toggle);
            if !seen.contains(&next) {
                seen.push(next);
                frontier.push(next);
            }
        }
    }
    seen.sort();
    Ok(seen)
}

/// Result of a multi-site emulation: the final traversal state plus the
/// final selector of every unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnrolledOutcome {
    pub state: ChecksumState,
    pub selectors: Vec<OpSelector>,
}

/// Faithfully emulate an unrolled kernel described by `layout`, with every
/// modification site outside the region.
pub fn emulate_unrolled(
    region: Region<'_>,
    layout: &KernelLayout,
    init: ChecksumState,
) -> Result<UnrolledOutcome, OracleError> {
    let sites = vec![None; layout.total_units()];
    emulate_unrolled_with_sites(region, layout, &sites, init)
}

/// Faithfully emulate an unrolled kernel, tracking each unit's opcode field
/// individually.
///
/// Qword `i` of the region is processed by unit `i mod total_units` using
/// that unit's current selector; the step's toggle is applied to the unit's
/// pairing partner (see [`KernelLayout::partner`]). `sites[u]`, when
/// present, is the region-relative byte offset of unit `u`'s opcode byte:
/// a read covering it substitutes the unit's live selector, exactly as the
/// native kernel observes its own patched bytes.
///
/// The emulation checks every data read against the complete site table.
/// That per-qword scan is the honest cost of reproducing the kernel's
/// semantics without self-modification, and it grows with the unroll depth;
/// callers wanting a fast checksum should use a native kernel instead.
pub fn emulate_unrolled_with_sites(
    region: Region<'_>,
    layout: &KernelLayout,
    sites: &[Option<usize>],
    init: ChecksumState,
) -> Result<UnrolledOutcome, OracleError> {
    let total = layout.total_units();
    if total == 0 {
        return Err(OracleError::LayoutMismatch("layout has no units".into()));
    }
    if sites.len() != total {
        return Err(OracleError::LayoutMismatch(format!(
            "{} site entries for {} units",
            sites.len(),
            total
        )));
    }

    // Tracked site table: qword offset per unit, u64::MAX marking a site
    // outside the region so the scan still touches every entry.
    let mut site_qwords = vec![u64::MAX; total];
    let mut site_fields = vec![ModificationSite::for_byte_offset(0); total];
    for (unit, site) in sites.iter().enumerate() {
        if let Some(byte_offset) = *site {
            let site = ModificationSite::for_byte_offset(byte_offset);
            if site.qword_offset() < region.len() {
                site_qwords[unit] = site.qword_offset() as u64;
                site_fields[unit] = site;
            }
        }
    }

    let mut selectors = vec![init.op; total];
    let mut sum = init.sum;
    let mut cursor = init.cursor;
    let qwords = region.qword_count();

    for i in 0..qwords {
        let unit = i % total;
        let mut data = region.qword_at(cursor);
        // Full scan: a faithful emulation cannot know in advance which
        // reads cover a live opcode field.
        for u in 0..total {
            if site_qwords[u] == cursor as u64 {
                data = site_fields[u].substitute(data, selectors[u]);
            }
        }
        let op = selectors[unit];
        let stepped = step(ChecksumState { sum, op, cursor }, data);
        sum = stepped.sum;
        cursor = stepped.cursor;
        let toggle = stepped.op.bits() ^ op.bits();
        let partner = layout.partner(unit);
        selectors[partner] = selectors[partner].toggled(toggle);
    }

    let exit_unit = qwords % total;
    Ok(UnrolledOutcome {
        state: ChecksumState {
            sum,
            op: selectors[exit_unit],
            cursor,
        },
        selectors,
    })
}
