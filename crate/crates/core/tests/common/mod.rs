//! Shared test helpers: an independent instruction-level interpreter of the
//! self-patching checksum loop, and seeded region generation.
#![allow(dead_code)] // each test binary uses a subset
//!
//! The interpreter is deliberately written against the *listing* — one
//! fetch/execute step per instruction over an explicit register file — so
//! it shares no code path with the library's emulation. Carry is forced
//! clear at each combine, matching the generated kernels' structural
//! guarantee.

use rand::RngCore;
use rand_chacha::ChaCha8Rng;

/// Where the loop's mutable combine opcode lives.
#[derive(Debug, Clone, Copy)]
pub enum OpcodeCell {
    /// The kernel patches a byte outside the checksummed region.
    Outside,
    /// The kernel's opcode byte sits inside the region at this offset
    /// (the introspective case).
    InRegion(usize),
}

#[derive(Debug)]
struct Machine {
    rbx: u64,
    rsi: u64,
    rdi: u64,
    dl: u8,
    al: u8,
    sf: bool,
    pf: bool,
    mem: Vec<u8>,
    opcode_outside: u8,
    cell: OpcodeCell,
}

impl Machine {
    fn opcode_byte(&self) -> u8 {
        match self.cell {
            OpcodeCell::Outside => self.opcode_outside,
            OpcodeCell::InRegion(offset) => self.mem[offset],
        }
    }

    fn opcode_byte_mut(&mut self) -> &mut u8 {
        match self.cell {
            OpcodeCell::Outside => &mut self.opcode_outside,
            OpcodeCell::InRegion(offset) => &mut self.mem[offset],
        }
    }

    fn load_qword(&self, addr: u64) -> u64 {
        let i = addr as usize;
        u64::from_le_bytes(self.mem[i..i + 8].try_into().unwrap())
    }

    // One instruction each, in listing order.

    fn combine(&mut self) -> u64 {
        // Field bits [3:5] of the opcode byte select the operation; carry
        // is architecturally clear on entry.
        let field = (self.opcode_byte() >> 3) & 7;
        let value = self.load_qword(self.rsi);
        let res = match field {
            2 => {
                // add with carry, carry = 0
                self.rbx = self.rbx.wrapping_add(value);
                self.rbx
            }
            3 => {
                // subtract with borrow, borrow = 0
                self.rbx = self.rbx.wrapping_sub(value);
                self.rbx
            }
            6 => {
                self.rbx ^= value;
                self.rbx
            }
            7 => self.rbx.wrapping_sub(value),
            other => panic!("opcode field {other} is unreachable from a valid start"),
        };
        self.sf = res >> 63 != 0;
        self.pf = (res as u8).count_ones().is_multiple_of(2);
        res
    }

    fn set_s_dl(&mut self) {
        self.dl = self.sf as u8;
    }

    fn set_p_al(&mut self) {
        self.al = self.pf as u8;
    }

    fn shl_al_2(&mut self) {
        self.al <<= 2;
    }

    fn or_dl_al(&mut self) {
        self.dl |= self.al;
    }

    fn shl_dl_3(&mut self) {
        self.dl <<= 3;
    }

    fn xor_opcode_dl(&mut self) {
        let dl = self.dl;
        *self.opcode_byte_mut() ^= dl;
    }

    fn lea_advance(&mut self) {
        self.rsi = self.rsi.wrapping_add(8);
    }

    fn loop_again(&self) -> bool {
        // cmp rdi, rsi ; jg — signed compare on small offsets.
        (self.rdi as i64) > (self.rsi as i64)
    }
}

/// Final interpreter state.
pub struct InterpOutcome {
    pub sum: u64,
    /// Selector bits recovered from the live opcode byte.
    pub selector: u8,
    pub qwords_processed: usize,
}

/// Run the checksum listing one instruction at a time over `region`.
///
/// `init_selector` must be in {0,1,4,5}; the opcode byte starts as the
/// combine instruction for that selector. If `cell` points into the
/// region, the caller must have seeded that byte with the same opcode.
pub fn interpret_listing(
    region: &[u8],
    cell: OpcodeCell,
    init_selector: u8,
    init_sum: u64,
) -> InterpOutcome {
    assert_eq!(region.len() % 8, 0);
    let opcode = 0x03u8 + ((init_selector | 2) << 3);
    if let OpcodeCell::InRegion(offset) = cell {
        assert_eq!(region[offset], opcode, "seed the in-region opcode byte first");
    }
    let mut m = Machine {
        rbx: init_sum,
        rsi: 0,
        rdi: region.len() as u64,
        dl: 0,
        al: 0,
        sf: false,
        pf: false,
        mem: region.to_vec(),
        opcode_outside: opcode,
        cell,
    };
    let mut qwords = 0;
    if m.rdi > m.rsi {
        loop {
            m.combine();
            m.set_s_dl();
            m.set_p_al();
            m.shl_al_2();
            m.or_dl_al();
            m.shl_dl_3();
            m.xor_opcode_dl();
            m.lea_advance();
            qwords += 1;
            if !m.loop_again() {
                break;
            }
        }
    }
    InterpOutcome {
        sum: m.rbx,
        selector: (m.opcode_byte() >> 3) & 0b101,
        qwords_processed: qwords,
    }
}

pub fn seeded_bytes(rng: &mut ChaCha8Rng, len: usize) -> Vec<u8> {
    let mut v = vec![0u8; len];
    rng.fill_bytes(&mut v);
    v
}

/// Log-uniform region size in `[8, max]` bytes, 8-aligned.
pub fn random_region_len(rng: &mut ChaCha8Rng, max: usize) -> usize {
    let max_qwords = (max / 8).max(1);
    let bits = 64 - (max_qwords as u64).leading_zeros();
    let exp = rng.next_u64() % bits as u64;
    let bound = (1u64 << exp).min(max_qwords as u64);
    let qwords = 1 + (rng.next_u64() % bound.max(1));
    (qwords as usize).min(max_qwords) * 8
}
