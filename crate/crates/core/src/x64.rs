//! Byte-exact encoder for the instruction subset the checksum kernels use.
//!
//! This is an encoder, not an assembler: each instruction kind has one
//! hardwired encoding (REX included) so the emitted bytes are auditable and
//! every kind has a fixed length. Branch widths are chosen explicitly by
//! the caller and never relaxed — layout math depends on stable sizes.
//!
//! The arithmetic family is keyed by a 3-bit field in bits `[3:5]` of the
//! opcode byte: `opcode = 0x03 + (field << 3)` selects among
//! ADD/OR/ADC/SBB/AND/SUB/XOR/CMP for a 64-bit register destination and
//! memory source. Toggling bits of that field in place is what turns a
//! checksum loop into self-modifying code.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum X64Error {
    #[error("displacement {disp} does not fit in {width:?}")]
    DisplacementOutOfRange { disp: i64, width: RelWidth },
    #[error("unsupported operand: {0}")]
    UnsupportedOperand(&'static str),
    #[error("byte {0:#04x} is not an arithmetic-family opcode")]
    UnknownOpcode(u8),
    #[error("arithmetic field {0} exceeds 3 bits")]
    InvalidField(u8),
    #[error("label {0:?} was never bound")]
    UnboundLabel(Label),
    #[error("label {0:?} bound twice")]
    RebindLabel(Label),
}

/// General-purpose 64-bit registers. Only the low eight are encodable; the
/// kernels never need a REX.B extension.
#[repr(u8)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reg64 {
    Rax = 0,
    Rcx = 1,
    Rdx = 2,
    Rbx = 3,
    Rsp = 4,
    Rbp = 5,
    Rsi = 6,
    Rdi = 7,
}

#[repr(u8)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reg8 {
    Al = 0,
    Cl = 1,
    Dl = 2,
    Bl = 3,
}

/// Condition codes by hardware encoding.
#[repr(u8)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cc {
    /// Sign set.
    S = 0x8,
    /// Parity set (even low-byte parity).
    P = 0xA,
    /// Less or equal (signed).
    Le = 0xE,
    /// Greater (signed).
    G = 0xF,
}

/// Explicit relative-branch width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelWidth {
    Rel8,
    Rel32,
}

impl RelWidth {
    fn fits(self, disp: i64) -> bool {
        match self {
            RelWidth::Rel8 => i8::try_from(disp).is_ok(),
            RelWidth::Rel32 => i32::try_from(disp).is_ok(),
        }
    }

    fn disp_len(self) -> usize {
        match self {
            RelWidth::Rel8 => 1,
            RelWidth::Rel32 => 4,
        }
    }
}

/// The 3-bit selector of the shared arithmetic instruction pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArithField(u8);

impl ArithField {
    pub fn new(value: u8) -> Result<Self, X64Error> {
        if value > 7 {
            return Err(X64Error::InvalidField(value));
        }
        Ok(ArithField(value))
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn mnemonic(self) -> &'static str {
        ["add", "or", "adc", "sbb", "and", "sub", "xor", "cmp"][self.0 as usize]
    }
}

/// Opcode byte for an arithmetic field: `0x03 + field * 8`.
pub fn arith_opcode(field: ArithField) -> u8 {
    0x03 + (field.value() << 3)
}

/// Inverse of [`arith_opcode`].
pub fn decode_field(opcode: u8) -> Result<ArithField, X64Error> {
    if !(0x03..=0x3B).contains(&opcode) || !(opcode - 0x03).is_multiple_of(8) {
        return Err(X64Error::UnknownOpcode(opcode));
    }
    ArithField::new((opcode - 0x03) >> 3)
}

/// Instructions the kernels are built from. Operand forms are restricted to
/// what the emitters need; anything else is an encoding error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Instr {
    /// `op64 dst, qword [src]` — the self-patchable checksum op.
    Arith { field: ArithField, dst: Reg64, src: Reg64 },
    /// `setcc dst8`.
    SetCc { cc: Cc, dst: Reg8 },
    /// `shl dst8, imm`.
    ShlImm { dst: Reg8, imm: u8 },
    /// `or dst8, src8`.
    OrR8 { dst: Reg8, src: Reg8 },
    /// `xor byte [rip + disp], src8` — the self-patch store.
    XorRipR8 { disp: i32, src: Reg8 },
    /// `lea dst, [base + disp8]` — flag-free cursor arithmetic.
    Lea { dst: Reg64, base: Reg64, disp: i8 },
    /// `cmp left, right` (64-bit registers).
    CmpR64 { left: Reg64, right: Reg64 },
    /// `mov dst, src` (64-bit registers).
    MovR64 { dst: Reg64, src: Reg64 },
    /// `xchg a, b` (64-bit registers).
    Xchg { a: Reg64, b: Reg64 },
    Push(Reg64),
    Pop(Reg64),
    Ret,
    Clc,
}

impl Instr {
    /// Exact encoding. Instructions with label targets are emitted through
    /// [`CodeBuffer`] instead.
    pub fn encode(&self) -> Result<Vec<u8>, X64Error> {
        let mut out = Vec::with_capacity(8);
        match *self {
            Instr::Arith { field, dst, src } => {
                // mod=00 indirect forms of rsp/rbp need SIB or disp bytes.
                if matches!(src, Reg64::Rsp | Reg64::Rbp) {
                    return Err(X64Error::UnsupportedOperand("arith source [rsp]/[rbp]"));
                }
                out.extend_from_slice(&[0x48, arith_opcode(field), modrm(0b00, dst as u8, src as u8)]);
            }
            Instr::SetCc { cc, dst } => {
                out.extend_from_slice(&[0x0F, 0x90 + cc as u8, modrm(0b11, 0, dst as u8)]);
            }
            Instr::ShlImm { dst, imm } => {
                out.extend_from_slice(&[0xC0, modrm(0b11, 4, dst as u8), imm]);
            }
            Instr::OrR8 { dst, src } => {
                out.extend_from_slice(&[0x0A, modrm(0b11, dst as u8, src as u8)]);
            }
            Instr::XorRipR8 { disp, src } => {
                out.extend_from_slice(&[0x30, modrm(0b00, src as u8, 0b101)]);
                out.extend_from_slice(&disp.to_le_bytes());
            }
            Instr::Lea { dst, base, disp } => {
                if matches!(base, Reg64::Rsp) {
                    return Err(X64Error::UnsupportedOperand("lea base rsp"));
                }
                out.extend_from_slice(&[0x48, 0x8D, modrm(0b01, dst as u8, base as u8), disp as u8]);
            }
            Instr::CmpR64 { left, right } => {
                out.extend_from_slice(&[0x48, 0x3B, modrm(0b11, left as u8, right as u8)]);
            }
            Instr::MovR64 { dst, src } => {
                out.extend_from_slice(&[0x48, 0x8B, modrm(0b11, dst as u8, src as u8)]);
            }
            Instr::Xchg { a, b } => {
                out.extend_from_slice(&[0x48, 0x87, modrm(0b11, b as u8, a as u8)]);
            }
            Instr::Push(r) => out.push(0x50 + r as u8),
            Instr::Pop(r) => out.push(0x58 + r as u8),
            Instr::Ret => out.push(0xC3),
            Instr::Clc => out.push(0xF8),
        }
        Ok(out)
    }

    /// Encoded length; constant per kind and operand width.
    pub fn encoded_len(&self) -> usize {
        match self {
            Instr::Arith { .. } => 3,
            Instr::SetCc { .. } => 3,
            Instr::ShlImm { .. } => 3,
            Instr::OrR8 { .. } => 2,
            Instr::XorRipR8 { .. } => 6,
            Instr::Lea { .. } => 4,
            Instr::CmpR64 { .. } => 3,
            Instr::MovR64 { .. } => 3,
            Instr::Xchg { .. } => 3,
            Instr::Push(_) | Instr::Pop(_) | Instr::Ret | Instr::Clc => 1,
        }
    }
}

fn modrm(mode: u8, reg: u8, rm: u8) -> u8 {
    (mode << 6) | ((reg & 7) << 3) | (rm & 7)
}

/// Emission trace entry used for structural checks on generated kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Emitted {
    Arith(ArithField),
    SetCc,
    Shl,
    Or8,
    XorRip,
    Lea,
    Cmp,
    Mov,
    Xchg,
    Push,
    Pop,
    Ret,
    Clc,
    Jcc,
    Jmp,
}

impl Emitted {
    /// Whether the instruction leaves every flag untouched.
    pub fn flag_transparent(self) -> bool {
        matches!(
            self,
            Emitted::Lea
                | Emitted::Mov
                | Emitted::Xchg
                | Emitted::Push
                | Emitted::Pop
                | Emitted::Jcc
                | Emitted::Jmp
                | Emitted::Ret
                | Emitted::SetCc
        )
    }

    /// Whether the instruction guarantees a clear carry flag afterwards.
    ///
    /// A compare counts: the kernels only fall through or loop on it when
    /// the end pointer is above the cursor, which leaves no borrow.
    pub fn guarantees_clear_carry(self) -> bool {
        matches!(self, Emitted::Clc | Emitted::XorRip | Emitted::Cmp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Label(usize);

#[derive(Debug, Clone, Copy)]
struct Fixup {
    label: Label,
    disp_offset: usize,
    end_offset: usize,
    width: RelWidth,
}

/// Growable code buffer with labels and relative-displacement fixups.
#[derive(Debug, Default)]
pub struct CodeBuffer {
    bytes: Vec<u8>,
    labels: Vec<Option<usize>>,
    fixups: Vec<Fixup>,
    trace: Vec<(usize, Emitted)>,
}

impl CodeBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn offset(&self) -> usize {
        self.bytes.len()
    }

    pub fn new_label(&mut self) -> Label {
        self.labels.push(None);
        Label(self.labels.len() - 1)
    }

    pub fn bind_label(&mut self, label: Label) -> Result<(), X64Error> {
        let slot = &mut self.labels[label.0];
        if slot.is_some() {
            return Err(X64Error::RebindLabel(label));
        }
        *slot = Some(self.bytes.len());
        Ok(())
    }

    pub fn emit(&mut self, instr: Instr) -> Result<usize, X64Error> {
        let at = self.bytes.len();
        let encoded = instr.encode()?;
        debug_assert_eq!(encoded.len(), instr.encoded_len());
        self.bytes.extend_from_slice(&encoded);
        self.trace.push((
            at,
            match instr {
                Instr::Arith { field, .. } => Emitted::Arith(field),
                Instr::SetCc { .. } => Emitted::SetCc,
                Instr::ShlImm { .. } => Emitted::Shl,
                Instr::OrR8 { .. } => Emitted::Or8,
                Instr::XorRipR8 { .. } => Emitted::XorRip,
                Instr::Lea { .. } => Emitted::Lea,
                Instr::CmpR64 { .. } => Emitted::Cmp,
                Instr::MovR64 { .. } => Emitted::Mov,
                Instr::Xchg { .. } => Emitted::Xchg,
                Instr::Push(_) => Emitted::Push,
                Instr::Pop(_) => Emitted::Pop,
                Instr::Ret => Emitted::Ret,
                Instr::Clc => Emitted::Clc,
            },
        ));
        Ok(at)
    }

    /// `xor byte [rip + disp], src` with the displacement computed so the
    /// store hits `target_offset` in this buffer.
    pub fn emit_xor_rip_to(&mut self, target_offset: usize, src: Reg8) -> Result<usize, X64Error> {
        let end = self.bytes.len() as i64 + 6;
        let disp = target_offset as i64 - end;
        let disp = i32::try_from(disp).map_err(|_| X64Error::DisplacementOutOfRange {
            disp,
            width: RelWidth::Rel32,
        })?;
        self.emit(Instr::XorRipR8 { disp, src })
    }

    /// Conditional jump to a label; width is fixed by the caller and
    /// checked at resolution.
    pub fn emit_jcc(&mut self, cc: Cc, width: RelWidth, label: Label) -> Result<usize, X64Error> {
        let at = self.bytes.len();
        match width {
            RelWidth::Rel8 => self.bytes.extend_from_slice(&[0x70 + cc as u8, 0]),
            RelWidth::Rel32 => {
                self.bytes.extend_from_slice(&[0x0F, 0x80 + cc as u8]);
                self.bytes.extend_from_slice(&[0; 4]);
            }
        }
        self.trace.push((at, Emitted::Jcc));
        self.push_fixup(label, width);
        Ok(at)
    }

    /// Unconditional jump to a label.
    pub fn emit_jmp(&mut self, width: RelWidth, label: Label) -> Result<usize, X64Error> {
        let at = self.bytes.len();
        match width {
            RelWidth::Rel8 => self.bytes.extend_from_slice(&[0xEB, 0]),
            RelWidth::Rel32 => {
                self.bytes.push(0xE9);
                self.bytes.extend_from_slice(&[0; 4]);
            }
        }
        self.trace.push((at, Emitted::Jmp));
        self.push_fixup(label, width);
        Ok(at)
    }

    fn push_fixup(&mut self, label: Label, width: RelWidth) {
        let end_offset = self.bytes.len();
        self.fixups.push(Fixup {
            label,
            disp_offset: end_offset - width.disp_len(),
            end_offset,
            width,
        });
    }

    /// Fill with `fill` up to `offset`.
    pub fn pad_to(&mut self, offset: usize, fill: u8) {
        assert!(offset >= self.bytes.len(), "cannot pad backwards");
        self.bytes.resize(offset, fill);
    }

    /// Patch every pending displacement. Buffer length is unchanged.
    pub fn resolve_fixups(&mut self) -> Result<(), X64Error> {
        for fixup in std::mem::take(&mut self.fixups) {
            let target = self.labels[fixup.label.0].ok_or(X64Error::UnboundLabel(fixup.label))?;
            let disp = target as i64 - fixup.end_offset as i64;
            if !fixup.width.fits(disp) {
                return Err(X64Error::DisplacementOutOfRange {
                    disp,
                    width: fixup.width,
                });
            }
            match fixup.width {
                RelWidth::Rel8 => self.bytes[fixup.disp_offset] = disp as i8 as u8,
                RelWidth::Rel32 => self.bytes[fixup.disp_offset..fixup.disp_offset + 4]
                    .copy_from_slice(&(disp as i32).to_le_bytes()),
            }
        }
        Ok(())
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn trace(&self) -> &[(usize, Emitted)] {
        &self.trace
    }

    pub fn into_bytes(mut self) -> Result<Vec<u8>, X64Error> {
        self.resolve_fixups()?;
        Ok(self.bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_loop_encodings_match_reference_bytes() {
        let cases: [(Instr, &[u8]); 6] = [
            (
                Instr::Arith { field: ArithField::new(2).unwrap(), dst: Reg64::Rbx, src: Reg64::Rsi },
                &[0x48, 0x13, 0x1E],
            ),
            (Instr::SetCc { cc: Cc::S, dst: Reg8::Dl }, &[0x0F, 0x98, 0xC2]),
            (Instr::SetCc { cc: Cc::P, dst: Reg8::Al }, &[0x0F, 0x9A, 0xC0]),
            (Instr::ShlImm { dst: Reg8::Al, imm: 2 }, &[0xC0, 0xE0, 0x02]),
            (Instr::ShlImm { dst: Reg8::Dl, imm: 3 }, &[0xC0, 0xE2, 0x03]),
            (Instr::OrR8 { dst: Reg8::Dl, src: Reg8::Al }, &[0x0A, 0xD0]),
        ];
        for (instr, expect) in cases {
            assert_eq!(instr.encode().unwrap(), expect, "{instr:?}");
        }
    }

    #[test]
    fn arith_opcode_table() {
        let rows: [(u8, u8, &str); 8] = [
            (0, 0x03, "add"),
            (1, 0x0B, "or"),
            (2, 0x13, "adc"),
            (3, 0x1B, "sbb"),
            (4, 0x23, "and"),
            (5, 0x2B, "sub"),
            (6, 0x33, "xor"),
            (7, 0x3B, "cmp"),
        ];
        for (field, opcode, mnemonic) in rows {
            let f = ArithField::new(field).unwrap();
            assert_eq!(arith_opcode(f), opcode);
            assert_eq!(f.mnemonic(), mnemonic);
            assert_eq!(decode_field(opcode).unwrap(), f);
        }
        assert_eq!(decode_field(0x05), Err(X64Error::UnknownOpcode(0x05)));
        assert_eq!(decode_field(0x43), Err(X64Error::UnknownOpcode(0x43)));
        assert!(ArithField::new(8).is_err());
    }

    #[test]
    fn xor_rip_backward_displacement() {
        // Store aimed 16 bytes before its own start: disp = -16 - 6.
        let mut buf = CodeBuffer::new();
        buf.pad_to(16, 0x90);
        buf.emit_xor_rip_to(0, Reg8::Dl).unwrap();
        let bytes = buf.into_bytes().unwrap();
        assert_eq!(&bytes[16..18], &[0x30, 0x15]);
        assert_eq!(i32::from_le_bytes(bytes[18..22].try_into().unwrap()), -22);
    }

    #[test]
    fn xor_rip_matches_fixed_disp_form() {
        assert_eq!(
            Instr::XorRipR8 { disp: -16, src: Reg8::Dl }.encode().unwrap(),
            vec![0x30, 0x15, 0xF0, 0xFF, 0xFF, 0xFF],
        );
    }

    #[test]
    fn forward_jcc_rel8() {
        let mut buf = CodeBuffer::new();
        let label = buf.new_label();
        buf.emit_jcc(Cc::G, RelWidth::Rel8, label).unwrap();
        buf.pad_to(7, 0x90);
        buf.bind_label(label).unwrap();
        let bytes = buf.into_bytes().unwrap();
        assert_eq!(bytes[0], 0x7F);
        assert_eq!(bytes[1] as i8, 5);
    }

    #[test]
    fn backward_jmp_rel32() {
        let mut buf = CodeBuffer::new();
        let top = buf.new_label();
        buf.bind_label(top).unwrap();
        buf.pad_to(100, 0x90);
        buf.emit_jmp(RelWidth::Rel32, top).unwrap();
        let bytes = buf.into_bytes().unwrap();
        assert_eq!(bytes[100], 0xE9);
        assert_eq!(i32::from_le_bytes(bytes[101..105].try_into().unwrap()), -105);
    }

    #[test]
    fn unbound_label_is_an_error() {
        let mut buf = CodeBuffer::new();
        let label = buf.new_label();
        buf.emit_jmp(RelWidth::Rel8, label).unwrap();
        assert_eq!(buf.into_bytes().err(), Some(X64Error::UnboundLabel(Label(0))));
    }

    #[test]
    fn rel8_overflow_is_an_error() {
        let mut buf = CodeBuffer::new();
        let label = buf.new_label();
        buf.emit_jcc(Cc::Le, RelWidth::Rel8, label).unwrap();
        buf.pad_to(400, 0x90);
        buf.bind_label(label).unwrap();
        assert!(matches!(
            buf.into_bytes(),
            Err(X64Error::DisplacementOutOfRange { width: RelWidth::Rel8, .. })
        ));
    }

    #[test]
    fn rebind_is_an_error() {
        let mut buf = CodeBuffer::new();
        let label = buf.new_label();
        buf.bind_label(label).unwrap();
        assert_eq!(buf.bind_label(label), Err(X64Error::RebindLabel(label)));
    }

    #[test]
    fn prologue_forms_encode() {
        assert_eq!(
            Instr::MovR64 { dst: Reg64::Rbx, src: Reg64::Rdx }.encode().unwrap(),
            vec![0x48, 0x8B, 0xDA]
        );
        assert_eq!(
            Instr::Xchg { a: Reg64::Rsi, b: Reg64::Rdi }.encode().unwrap(),
            vec![0x48, 0x87, 0xFE]
        );
        assert_eq!(Instr::Push(Reg64::Rbx).encode().unwrap(), vec![0x53]);
        assert_eq!(Instr::Pop(Reg64::Rbx).encode().unwrap(), vec![0x5B]);
        assert_eq!(
            Instr::Lea { dst: Reg64::Rsi, base: Reg64::Rsi, disp: 8 }.encode().unwrap(),
            vec![0x48, 0x8D, 0x76, 0x08]
        );
        assert_eq!(
            Instr::CmpR64 { left: Reg64::Rdi, right: Reg64::Rsi }.encode().unwrap(),
            vec![0x48, 0x3B, 0xFE]
        );
        assert_eq!(
            Instr::MovR64 { dst: Reg64::Rax, src: Reg64::Rbx }.encode().unwrap(),
            vec![0x48, 0x8B, 0xC3]
        );
    }

    #[test]
    fn lengths_are_constant() {
        let samples = [
            Instr::Arith { field: ArithField::new(6).unwrap(), dst: Reg64::Rbx, src: Reg64::Rcx },
            Instr::SetCc { cc: Cc::P, dst: Reg8::Al },
            Instr::ShlImm { dst: Reg8::Dl, imm: 3 },
            Instr::OrR8 { dst: Reg8::Dl, src: Reg8::Al },
            Instr::XorRipR8 { disp: 12345, src: Reg8::Dl },
            Instr::Lea { dst: Reg64::Rcx, base: Reg64::Rcx, disp: 8 },
            Instr::CmpR64 { left: Reg64::Rdi, right: Reg64::Rsi },
            Instr::MovR64 { dst: Reg64::Rcx, src: Reg64::Rdi },
            Instr::Xchg { a: Reg64::Rsi, b: Reg64::Rdi },
            Instr::Push(Reg64::Rbx),
            Instr::Pop(Reg64::Rbx),
            Instr::Ret,
            Instr::Clc,
        ];
        for instr in samples {
            assert_eq!(instr.encode().unwrap().len(), instr.encoded_len(), "{instr:?}");
        }
    }

    #[test]
    fn unsupported_operands_rejected() {
        assert!(Instr::Arith {
            field: ArithField::new(2).unwrap(),
            dst: Reg64::Rbx,
            src: Reg64::Rbp
        }
        .encode()
        .is_err());
        assert!(Instr::Lea { dst: Reg64::Rcx, base: Reg64::Rsp, disp: 8 }.encode().is_err());
    }
}
