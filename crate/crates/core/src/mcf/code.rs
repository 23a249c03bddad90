//! Instruction set of the mobile-code VM.
//!
//! Branch offsets are signed and relative to the first byte of the branch
//! instruction itself.

use std::fmt;

use crate::codec::ByteReader;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Opcode {
    Nop = 0x00,
    Iconst = 0x01,
    Sconst = 0x02,
    Nullconst = 0x03,
    Load = 0x10,
    Store = 0x11,
    Iadd = 0x20,
    Isub = 0x21,
    Imul = 0x22,
    Idiv = 0x23,
    Ifeq = 0x30,
    Iflt = 0x31,
    Goto = 0x32,
    New = 0x40,
    Invoke = 0x41,
    Getf = 0x42,
    Putf = 0x43,
    Ret = 0x50,
    Retv = 0x51,
    Dup = 0x60,
    Pop = 0x61,
}

impl Opcode {
    pub const ALL: [Opcode; 21] = [
        Opcode::Nop,
        Opcode::Iconst,
        Opcode::Sconst,
        Opcode::Nullconst,
        Opcode::Load,
        Opcode::Store,
        Opcode::Iadd,
        Opcode::Isub,
        Opcode::Imul,
        Opcode::Idiv,
        Opcode::Ifeq,
        Opcode::Iflt,
        Opcode::Goto,
        Opcode::New,
        Opcode::Invoke,
        Opcode::Getf,
        Opcode::Putf,
        Opcode::Ret,
        Opcode::Retv,
        Opcode::Dup,
        Opcode::Pop,
    ];

    pub fn from_byte(b: u8) -> Option<Opcode> {
        Self::ALL.iter().copied().find(|op| *op as u8 == b)
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Nop => "NOP",
            Opcode::Iconst => "ICONST",
            Opcode::Sconst => "SCONST",
            Opcode::Nullconst => "NULLCONST",
            Opcode::Load => "LOAD",
            Opcode::Store => "STORE",
            Opcode::Iadd => "IADD",
            Opcode::Isub => "ISUB",
            Opcode::Imul => "IMUL",
            Opcode::Idiv => "IDIV",
            Opcode::Ifeq => "IFEQ",
            Opcode::Iflt => "IFLT",
            Opcode::Goto => "GOTO",
            Opcode::New => "NEW",
            Opcode::Invoke => "INVOKE",
            Opcode::Getf => "GETF",
            Opcode::Putf => "PUTF",
            Opcode::Ret => "RET",
            Opcode::Retv => "RETV",
            Opcode::Dup => "DUP",
            Opcode::Pop => "POP",
        }
    }

    pub fn from_mnemonic(name: &str) -> Option<Opcode> {
        Self::ALL
            .iter()
            .copied()
            .find(|op| op.mnemonic().eq_ignore_ascii_case(name))
    }

    /// Operand width in bytes.
    pub fn operand_len(self) -> usize {
        match self {
            Opcode::Iconst => 4,
            Opcode::Sconst
            | Opcode::Ifeq
            | Opcode::Iflt
            | Opcode::Goto
            | Opcode::New
            | Opcode::Invoke
            | Opcode::Getf
            | Opcode::Putf => 2,
            Opcode::Load | Opcode::Store => 1,
            _ => 0,
        }
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

/// One decoded instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Instr {
    Nop,
    Iconst(i32),
    Sconst(u16),
    Nullconst,
    Load(u8),
    Store(u8),
    Iadd,
    Isub,
    Imul,
    Idiv,
    Ifeq(i16),
    Iflt(i16),
    Goto(i16),
    New(u16),
    Invoke(u16),
    Getf(u16),
    Putf(u16),
    Ret,
    Retv,
    Dup,
    Pop,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("unknown opcode 0x{opcode:02x} at pc {pc}")]
    UnknownOpcode { pc: usize, opcode: u8 },
    #[error("operand of {opcode} at pc {pc} runs past end of code")]
    TruncatedOperand { pc: usize, opcode: Opcode },
}

impl Instr {
    pub fn opcode(&self) -> Opcode {
        match self {
            Instr::Nop => Opcode::Nop,
            Instr::Iconst(_) => Opcode::Iconst,
            Instr::Sconst(_) => Opcode::Sconst,
            Instr::Nullconst => Opcode::Nullconst,
            Instr::Load(_) => Opcode::Load,
            Instr::Store(_) => Opcode::Store,
            Instr::Iadd => Opcode::Iadd,
            Instr::Isub => Opcode::Isub,
            Instr::Imul => Opcode::Imul,
            Instr::Idiv => Opcode::Idiv,
            Instr::Ifeq(_) => Opcode::Ifeq,
            Instr::Iflt(_) => Opcode::Iflt,
            Instr::Goto(_) => Opcode::Goto,
            Instr::New(_) => Opcode::New,
            Instr::Invoke(_) => Opcode::Invoke,
            Instr::Getf(_) => Opcode::Getf,
            Instr::Putf(_) => Opcode::Putf,
            Instr::Ret => Opcode::Ret,
            Instr::Retv => Opcode::Retv,
            Instr::Dup => Opcode::Dup,
            Instr::Pop => Opcode::Pop,
        }
    }

    pub fn encoded_len(&self) -> usize {
        1 + self.opcode().operand_len()
    }

    /// Decode the instruction starting at `pc`.
    pub fn decode(code: &[u8], pc: usize) -> Result<Instr, DecodeError> {
        let byte = code[pc];
        let opcode = Opcode::from_byte(byte).ok_or(DecodeError::UnknownOpcode { pc, opcode: byte })?;
        let mut r = ByteReader::new(&code[pc + 1..]);
        let trunc = |_| DecodeError::TruncatedOperand { pc, opcode };
        Ok(match opcode {
            Opcode::Nop => Instr::Nop,
            Opcode::Iconst => Instr::Iconst(r.i32().map_err(trunc)?),
            Opcode::Sconst => Instr::Sconst(r.u16().map_err(trunc)?),
            Opcode::Nullconst => Instr::Nullconst,
            Opcode::Load => Instr::Load(r.u8().map_err(trunc)?),
            Opcode::Store => Instr::Store(r.u8().map_err(trunc)?),
            Opcode::Iadd => Instr::Iadd,
            Opcode::Isub => Instr::Isub,
            Opcode::Imul => Instr::Imul,
            Opcode::Idiv => Instr::Idiv,
            Opcode::Ifeq => Instr::Ifeq(r.i16().map_err(trunc)?),
            Opcode::Iflt => Instr::Iflt(r.i16().map_err(trunc)?),
            Opcode::Goto => Instr::Goto(r.i16().map_err(trunc)?),
            Opcode::New => Instr::New(r.u16().map_err(trunc)?),
            Opcode::Invoke => Instr::Invoke(r.u16().map_err(trunc)?),
            Opcode::Getf => Instr::Getf(r.u16().map_err(trunc)?),
            Opcode::Putf => Instr::Putf(r.u16().map_err(trunc)?),
            Opcode::Ret => Instr::Ret,
            Opcode::Retv => Instr::Retv,
            Opcode::Dup => Instr::Dup,
            Opcode::Pop => Instr::Pop,
        })
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(self.opcode() as u8);
        match *self {
            Instr::Iconst(v) => out.extend_from_slice(&v.to_be_bytes()),
            Instr::Sconst(i) | Instr::New(i) | Instr::Invoke(i) | Instr::Getf(i) | Instr::Putf(i) => {
                out.extend_from_slice(&i.to_be_bytes())
            }
            Instr::Ifeq(o) | Instr::Iflt(o) | Instr::Goto(o) => out.extend_from_slice(&o.to_be_bytes()),
            Instr::Load(l) | Instr::Store(l) => out.push(l),
            _ => {}
        }
    }

    pub fn branch_offset(&self) -> Option<i16> {
        match *self {
            Instr::Ifeq(o) | Instr::Iflt(o) | Instr::Goto(o) => Some(o),
            _ => None,
        }
    }
}

/// Decode a whole method body into `(pc, instr)` pairs.
pub fn disassemble(code: &[u8]) -> Result<Vec<(usize, Instr)>, DecodeError> {
    let mut out = Vec::new();
    let mut pc = 0;
    while pc < code.len() {
        let ins = Instr::decode(code, pc)?;
        out.push((pc, ins));
        pc += ins.encoded_len();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn opcode_bytes_match_the_table() {
        assert_eq!(Opcode::Invoke as u8, 0x41);
        assert_eq!(Opcode::from_byte(0x51), Some(Opcode::Retv));
        assert_eq!(Opcode::from_byte(0x99), None);
        assert_eq!(Opcode::from_mnemonic("iadd"), Some(Opcode::Iadd));
        assert_eq!(Opcode::from_mnemonic("FLY"), None);
    }

    #[test]
    fn encode_decode_every_instruction() {
        let all = [
            Instr::Nop,
            Instr::Iconst(-7),
            Instr::Sconst(3),
            Instr::Nullconst,
            Instr::Load(2),
            Instr::Store(1),
            Instr::Iadd,
            Instr::Isub,
            Instr::Imul,
            Instr::Idiv,
            Instr::Ifeq(-4),
            Instr::Iflt(6),
            Instr::Goto(0),
            Instr::New(9),
            Instr::Invoke(10),
            Instr::Getf(11),
            Instr::Putf(12),
            Instr::Ret,
            Instr::Retv,
            Instr::Dup,
            Instr::Pop,
        ];
        let mut code = Vec::new();
        for i in &all {
            i.encode_into(&mut code);
        }
        let decoded: Vec<Instr> = disassemble(&code).unwrap().into_iter().map(|(_, i)| i).collect();
        assert_eq!(decoded, all);
    }

    #[test]
    fn truncated_operand_is_reported() {
        let err = disassemble(&[0x01, 0x00]).unwrap_err();
        assert_eq!(
            err,
            DecodeError::TruncatedOperand {
                pc: 0,
                opcode: Opcode::Iconst
            }
        );
    }
}
