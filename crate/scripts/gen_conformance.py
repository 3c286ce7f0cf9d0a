#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Write the interpreter conformance programs as raw little-endian .bpf files."""

import pathlib
import struct
import sys

OUT = pathlib.Path(__file__).resolve().parent.parent / "crates/core/tests/fixtures/conformance"


def ins(op, dst=0, src=0, off=0, imm=0):
    return struct.pack("<BBhi", op, (src << 4) | dst, off, imm)


def lddw(dst, value):
    value &= (1 << 64) - 1
    lo = value & 0xFFFFFFFF
    hi = value >> 32
    return ins(0x18, dst, 0, 0, struct.unpack("<i", struct.pack("<I", lo))[0]) + ins(
        0, 0, 0, 0, struct.unpack("<i", struct.pack("<I", hi))[0]
    )


EXIT = ins(0x95)


def mov(dst, imm):
    return ins(0xB7, dst, 0, 0, imm)


def movr(dst, src):
    return ins(0xBF, dst, src)


PROGRAMS = {
    "01_add_imm": mov(0, 2) + ins(0x07, 0, imm=3) + EXIT,
    "02_div64_reg_zero": mov(0, 10) + mov(1, 0) + ins(0x3F, 0, 1) + EXIT,
    "03_mod64_reg_zero": mov(0, 77) + mov(1, 0) + ins(0x9F, 0, 1) + EXIT,
    "04_div32_imm": lddw(0, 0xFFFF_FFFF_0000_0064) + ins(0x34, 0, imm=7) + EXIT,
    "05_mod32_reg_zero_low": mov(0, 1234) + mov(2, 0) + ins(0x9C, 0, 2) + EXIT,
    "06_lddw": lddw(0, 0x1122_3344_5566_7788) + EXIT,
    "07_lddw_negative_low": lddw(0, 0x0000_0001_8000_0000) + EXIT,
    "08_add32_zero_extends": mov(0, -1) + ins(0x04, 0, imm=0) + EXIT,
    "09_lsh64_reg_masked": mov(0, 1) + mov(1, 65) + ins(0x6F, 0, 1) + EXIT,
    "10_lsh32_reg_masked": mov(0, 3) + mov(1, 33) + ins(0x6C, 0, 1) + EXIT,
    "11_arsh64_imm": mov(0, -256) + ins(0xC7, 0, imm=4) + EXIT,
    "12_arsh32_reg": ins(0xB4, 0, imm=-0x80000000) + mov(1, 31) + ins(0xCC, 0, 1) + EXIT,
    "13_neg64_neg32": mov(0, 5) + ins(0x87, 0) + movr(1, 0) + ins(0x84, 1) + ins(0x0F, 0, 1) + EXIT,
    "14_mul_wrap": lddw(0, 0x8000_0000_0000_0001) + ins(0x27, 0, imm=3)
    + mov(1, 0x10000) + ins(0x2C, 1, 1) + ins(0xAF, 0, 1) + EXIT,
    "15_bitwise_mix": mov(0, 0x0F0F) + ins(0x47, 0, imm=0x7000) + ins(0x57, 0, imm=0x3FF0)
    + ins(0xA7, 0, imm=-1) + ins(0x17, 0, imm=9) + EXIT,
    "16_jeq_jne": mov(1, 7) + mov(0, 1) + ins(0x15, 1, off=1, imm=7) + mov(0, 2)
    + ins(0x55, 1, off=1, imm=8) + ins(0x07, 0, imm=100) + ins(0x07, 0, imm=10) + EXIT,
    "17_signed_jumps": mov(1, -5) + mov(0, 0) + ins(0x65, 1, off=1, imm=-6) + ins(0x07, 0, imm=1)
    + ins(0xC5, 1, off=1, imm=-4) + ins(0x07, 0, imm=2) + ins(0xD5, 1, off=1, imm=-6)
    + ins(0x07, 0, imm=4) + EXIT,
    "18_unsigned_vs_signed": mov(1, -1) + mov(2, 1) + mov(0, 0) + ins(0x2D, 1, 2, off=1)
    + ins(0x07, 0, imm=1) + ins(0x6D, 1, 2, off=1) + ins(0x07, 0, imm=2) + EXIT,
    "19_jmp32": lddw(1, 0x0000_0005_0000_0003) + mov(0, 0) + ins(0x16, 1, off=1, imm=3)
    + ins(0x07, 0, imm=1) + ins(0x15, 1, off=1, imm=3) + ins(0x07, 0, imm=2)
    + ins(0x66, 1, off=1, imm=-1) + ins(0x07, 0, imm=4) + EXIT,
    "20_jset": mov(1, 0b1010) + mov(0, 0) + ins(0x45, 1, off=1, imm=0b0100) + ins(0x07, 0, imm=1)
    + mov(2, 0b0010) + ins(0x4D, 1, 2, off=1) + ins(0x07, 0, imm=2) + EXIT,
    "21_stack_dw_roundtrip": lddw(1, 0xDEAD_BEEF_CAFE_F00D) + ins(0x7B, 10, 1, off=-8)
    + ins(0x79, 0, 10, off=-8) + EXIT,
    "22_stack_bytes_compose": ins(0x7A, 10, off=-8, imm=0) + ins(0x72, 10, off=-8, imm=0x11)
    + ins(0x72, 10, off=-7, imm=0x22) + ins(0x6A, 10, off=-6, imm=0x4433)
    + ins(0x62, 10, off=-4, imm=-0x789ABCDF) + ins(0x79, 0, 10, off=-8) + EXIT,
    "23_st_dw_imm_sign_extends": ins(0x7A, 10, off=-16, imm=-2) + ins(0x79, 0, 10, off=-16) + EXIT,
    "24_narrow_loads": lddw(1, 0x8877_6655_4433_2211) + ins(0x7B, 10, 1, off=-8)
    + ins(0x71, 2, 10, off=-8) + ins(0x69, 3, 10, off=-6) + ins(0x61, 4, 10, off=-4)
    + movr(0, 2) + ins(0x0F, 0, 3) + ins(0x0F, 0, 4) + EXIT,
    "25_ja_skip": mov(0, 1) + ins(0x05, off=2) + mov(0, 99) + mov(0, 98) + ins(0x07, 0, imm=41) + EXIT,
    "26_rsh32_upper_bits": lddw(0, 0xFFFF_FFFF_8000_0000) + ins(0x74, 0, imm=4) + EXIT,
    "27_mov32_reg": lddw(1, 0xAAAA_BBBB_CCCC_DDDD) + ins(0xBC, 0, 1) + EXIT,
    "28_fib_unrolled": mov(1, 0) + mov(2, 1)
    + b"".join(movr(3, 2) + ins(0x0F, 2, 1) + movr(1, 3) for _ in range(20)) + movr(0, 1) + EXIT,
    "29_div_mod_64": lddw(0, 0xFFFF_FFFF_FFFF_FFFF) + lddw(1, 0x1_0000_0001) + movr(2, 0)
    + ins(0x3F, 0, 1) + ins(0x9F, 2, 1) + ins(0x27, 0, imm=1000) + ins(0x0F, 0, 2)
    + ins(0x97, 0, imm=999983) + EXIT,
    "30_unsigned_range": lddw(1, 0x8000_0000_0000_0000) + mov(0, 0) + ins(0xB5, 1, off=1, imm=0x7FFF_FFFF)
    + ins(0x07, 0, imm=1) + ins(0x35, 1, off=1, imm=1) + ins(0x07, 0, imm=2)
    + ins(0xA5, 1, off=1, imm=0) + ins(0x07, 0, imm=4) + EXIT,
    "31_sub32_reg_wrap": mov(0, 1) + mov(1, 2) + ins(0x1C, 0, 1) + ins(0x24, 0, imm=3) + EXIT,
    "32_rsh64_reg": lddw(0, 0xF000_0000_0000_0000) + mov(1, 124) + ins(0x7F, 0, 1) + EXIT,
    "33_jmp32_signed_reg": lddw(1, 0x0000_0001_FFFF_FFFE) + mov(2, 1) + mov(0, 0)
    + ins(0xCE, 1, 2, off=1) + ins(0x07, 0, imm=1) + ins(0x2E, 1, 2, off=1)
    + ins(0x07, 0, imm=2) + EXIT,
    "34_xor_or_and_reg": lddw(1, 0x0123_4567_89AB_CDEF) + lddw(2, 0xFEDC_BA98_7654_3210)
    + movr(0, 1) + ins(0xAF, 0, 2) + movr(3, 1) + ins(0x5F, 3, 2) + ins(0x4F, 0, 3)
    + ins(0xA4, 0, imm=0x5555) + EXIT,
}


# Programs where the reference interpreter departs from kernel eBPF
# semantics; kept apart and checked against hand-computed values.
DIVERGENT = {
    # Unsigned 64-bit compare against a negative immediate: the immediate
    # is sign-extended, so 0x8000.. <= 0xffff_ffff_ffff_ffff holds.
    "jle_imm_sign_extends": lddw(1, 0x8000_0000_0000_0000) + mov(0, 0) + ins(0xB5, 1, off=1, imm=-1)
    + ins(0x07, 0, imm=1) + ins(0x07, 0, imm=2) + EXIT,
    # 32-bit MOD by zero keeps the low half and clears the upper half.
    "mod32_zero_zero_extends": lddw(0, 0x0000_0007_0000_0009) + mov(1, 0) + ins(0x9C, 0, 1) + EXIT,
}


def write(dir_, programs):
    dir_.mkdir(parents=True, exist_ok=True)
    for old in dir_.glob("*.bpf"):
        old.unlink()
    for name, code in programs.items():
        (dir_ / f"{name}.bpf").write_bytes(code)
    print(f"wrote {len(programs)} programs to {dir_}", file=sys.stderr)


def main():
    write(OUT, PROGRAMS)
    write(OUT.parent / "divergent", DIVERGENT)


if __name__ == "__main__":
    main()
