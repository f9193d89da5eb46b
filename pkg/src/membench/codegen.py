"""AArch64 source generation for the NEON and SVE kernels.

Loop bodies are emitted from the same parameters that drive
:func:`membench.kernels.kernel_metadata`, so the instruction counts a
handle declares are the instruction counts it executes.

Register use inside a kernel:
  x9..x12   address cursors (x9 only for post-increment / offset)
  x13       end of the working set
  x14       remaining passes
  v0..v7    accumulators (z0..z7 for SVE)
  v16..v23  load targets (z16..z23 for SVE)
"""

from .kernels import (ACCUMULATORS, AddressingMode, InstructionMix, IsaExtension,
                      KernelSpec, REGISTERS_PER_ITERATION, kernel_metadata, _VALID_ADDRESSING,
                      _VALID_REGS)

CURSOR_REGS = ("x9", "x10", "x11", "x12")

# metadata for SIMD kernels is width-agnostic in its instruction counts
_NEON_BYTES = 16


def symbol_name(spec):
    return (f"mb_{spec.isa_extension.value}_{spec.instruction_mix.value}_"
            f"{spec.addressing_mode.value}_r{spec.registers_per_load}")


def _reglist(ext, first, count):
    if ext is IsaExtension.NEON:
        return "{" + ", ".join(f"v{first + i}.2d" for i in range(count)) + "}"
    return "{" + ", ".join(f"z{first + i}.d" for i in range(count)) + "}"


def _load(ext, regs, first, address):
    if ext is IsaExtension.NEON:
        return f"ld1 {_reglist(ext, first, regs)}, {address}"
    return f"ld{regs}d {_reglist(ext, first, regs)}, p0/z, {address}"


def _fadd(ext, k):
    if ext is IsaExtension.NEON:
        return f"fadd v{k}.2d, v{k}.2d, v{16 + k}.2d"
    return f"fadd z{k}.d, z{k}.d, z{16 + k}.d"


def body_instructions(spec):
    """Instructions of one unrolled loop body, without loop control."""
    ext = spec.isa_extension
    if ext not in (IsaExtension.NEON, IsaExtension.SVE):
        raise ValueError("only NEON and SVE kernels are generated")
    meta = kernel_metadata(spec, _NEON_BYTES)
    regs = spec.registers_per_load
    mode = spec.addressing_mode
    out = []
    load_no = 0
    for _ in range(meta.body_iterations):
        for j in range(meta.loads_per_iteration):
            first = 16 + j * regs
            if mode is AddressingMode.MANUAL_INCREMENT:
                cursor = CURSOR_REGS[load_no % len(CURSOR_REGS)]
                out.append(_load(ext, regs, first, f"[{cursor}]"))
                if ext is IsaExtension.NEON:
                    out.append(f"add {cursor}, {cursor}, #{meta.cursor_advance_bytes}")
                else:
                    out.append(f"addvl {cursor}, {cursor}, #{len(CURSOR_REGS) * regs}")
            elif mode is AddressingMode.POST_INCREMENT:
                out.append(_load(ext, regs, first, f"[x9], #{meta.load_bytes}"))
            else:
                out.append(_load(ext, regs, first, f"[x9, #{j * regs}, mul vl]"))
            load_no += 1
        if mode is AddressingMode.OFFSET:
            out.append(f"addvl x9, x9, #{REGISTERS_PER_ITERATION}")
        for k in range(ACCUMULATORS):
            if spec.instruction_mix is InstructionMix.ARITH_FADD:
                out.append(_fadd(ext, k))
            elif spec.instruction_mix is InstructionMix.NOP_SUBSTITUTED:
                out.append("nop")
    return out


def _cursor_setup(spec):
    ext, regs = spec.isa_extension, spec.registers_per_load
    lines = ["mov x9, %[buf]"]
    if spec.addressing_mode is AddressingMode.MANUAL_INCREMENT:
        for c in range(1, len(CURSOR_REGS)):
            if ext is IsaExtension.NEON:
                lines.append(f"add {CURSOR_REGS[c]}, x9, #{c * regs * _NEON_BYTES}")
            else:
                lines.append(f"addvl {CURSOR_REGS[c]}, x9, #{c * regs}")
    return lines


def kernel_source(spec):
    ext = spec.isa_extension
    asm = []
    if ext is IsaExtension.SVE:
        asm.append("ptrue p0.d")
        asm += [f"dup z{k}.d, #0" for k in range(ACCUMULATORS)]
    else:
        asm += [f"movi v{k}.2d, #0" for k in range(ACCUMULATORS)]
    asm += ["mov x14, %[passes]", "add x13, %[buf], %[bytes]", "2:"]
    asm += _cursor_setup(spec)
    asm.append("1:")
    asm += body_instructions(spec)
    asm += ["cmp x9, x13", "b.lo 1b", "subs x14, x14, #1", "b.ne 2b"]
    if ext is IsaExtension.SVE:
        asm += [f"st1d z{k}.d, p0, [%[out], #{k}, mul vl]" for k in range(ACCUMULATORS)]
    else:
        asm += ["mov x15, %[out]",
                "st1 {v0.2d, v1.2d, v2.2d, v3.2d}, [x15], #64",
                "st1 {v4.2d, v5.2d, v6.2d, v7.2d}, [x15]"]
    clobbers = ['"x9"', '"x10"', '"x11"', '"x12"', '"x13"', '"x14"', '"x15"']
    clobbers += [f'"v{k}"' for k in list(range(ACCUMULATORS)) + list(range(16, 24))]
    if ext is IsaExtension.SVE:
        clobbers.append('"p0"')
    clobbers += ['"cc"', '"memory"']
    body = "\n".join(f'        "{line}\\n\\t"' for line in asm)
    return (
        f"void {symbol_name(spec)}(const double *buf, unsigned long bytes,\n"
        f"        unsigned long passes, double *out)\n"
        "{\n"
        "    __asm__ __volatile__(\n"
        f"{body}\n"
        "        :\n"
        '        : [buf] "r"(buf), [bytes] "r"(bytes), [passes] "r"(passes), [out] "r"(out)\n'
        f"        : {', '.join(clobbers)});\n"
        "}\n"
    )


def library_source(ext):
    ext = IsaExtension(ext)
    parts = [f"/* generated {ext.value} kernels */\n"]
    if ext is IsaExtension.SVE:
        parts.append(
            "unsigned long mb_sve_vector_bytes(void)\n{\n"
            "    unsigned long v;\n"
            '    __asm__ __volatile__("mov %0, #0\\n\\tincb %0" : "=r"(v));\n'
            "    return v;\n}\n")
    for mix in InstructionMix:
        for mode in _VALID_ADDRESSING[ext]:
            for regs in _VALID_REGS[ext]:
                parts.append(kernel_source(KernelSpec(ext, mix, mode, regs)))
    return "\n".join(parts)
