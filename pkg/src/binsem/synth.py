"""Deterministic synthetic corpora for tests and desk-scale runs.

``fixture_records`` renders small "source programs" as Intel-syntax listings
for every (compiler, optimization level) build and feeds them through
``parse_asm_text``, so the output exercises the whole ingest path. The
``toy_*`` helpers produce token-level corpora with planted structure that a
small encoder can learn in seconds.
"""

import dataclasses
import hashlib

import numpy as np

from .ingest import SectionMap, parse_asm_text
from .normalizer import NormalizedFunction

COMPILERS = ("gcc", "clang")
OPT_LEVELS = ("O0", "O1", "O2", "O3")

TEXT = (0x401000, 0x420000)
PLT = (0x400400, 0x400800)
RODATA = (0x421000, 0x422000)
DATA = (0x623000, 0x624000)
BSS = (0x625000, 0x626000)

LIBC = ("puts", "printf", "malloc", "free", "strlen", "memcpy", "strcmp", "fopen", "__stack_chk_fail")
EXTERN = ("xml_parse", "ssl_read", "z_inflate")

PROGRAMS = (
    ("gnutils", "find"),
    ("gnutils", "xargs"),
    ("spec2006", "bzip2"),
)


def _seed(*parts):
    h = hashlib.sha256("/".join(map(str, parts)).encode()).digest()
    return int.from_bytes(h[:8], "little")


def _hints():
    symbols = {}
    for i, name in enumerate(LIBC + EXTERN):
        symbols[PLT[0] + 0x10 * i] = name
    strings = {RODATA[0] + 0x20 * i: f"message {i}" for i in range(64)}
    return SectionMap(text=[TEXT], plt_got=[PLT], bss=[BSS], data=[DATA],
                      rodata_string=[RODATA], symbols=symbols, strings=strings,
                      libc_names=frozenset(LIBC))


def _plt(name):
    return PLT[0] + 0x10 * (LIBC + EXTERN).index(name)


def _program(testsuite, binary, fname, n_funcs):
    """Abstract statement list for one function; identical across builds."""
    rng = np.random.default_rng(_seed(testsuite, binary, fname))
    kinds = ["libc", "inner", "extern", "global", "string", "arith", "branch", "loop", "field", "data"]
    n = int(rng.integers(3, 9))
    stmts = []
    if rng.random() < 0.4:
        stmts.append(("canary",))
    for _ in range(n):
        k = kinds[int(rng.integers(len(kinds)))]
        if k == "libc":
            stmts.append(("libc", LIBC[int(rng.integers(len(LIBC)))]))
        elif k == "inner":
            stmts.append(("inner", int(rng.integers(n_funcs))))
        elif k == "extern":
            stmts.append(("extern", EXTERN[int(rng.integers(len(EXTERN)))]))
        elif k == "global":
            stmts.append(("global", int(rng.integers(0, 0x100)) * 8))
        elif k == "string":
            stmts.append(("string", int(rng.integers(64))))
        elif k == "arith":
            op = ["add", "sub", "and", "shl", "xor", "or"][int(rng.integers(6))]
            stmts.append(("arith", op, int(rng.integers(1, 200))))
        elif k == "branch":
            stmts.append(("branch", ["e", "ne", "l", "g", "le", "ge", "a", "b"][int(rng.integers(8))],
                          int(rng.integers(0, 64))))
        elif k == "loop":
            stmts.append(("loop", [1, 2, 4, 8][int(rng.integers(4))]))
        elif k == "field":
            stmts.append(("field", int(rng.integers(0, 6)) * 8))
        else:
            stmts.append(("data", int(rng.integers(0, 0x80)) * 8))
    if rng.random() < 0.15:
        stmts.append(("recurse",))
    return stmts


class _Emitter:
    def __init__(self, start):
        self.start = start
        self.lines = []

    @property
    def pc(self):
        return self.start + 4 * len(self.lines)

    def __call__(self, text):
        self.lines.append(f"{self.pc:x}: {text}")

    def text(self):
        return "\n".join(self.lines)


def _render(stmts, compiler, opt, start, func_starts):
    e = _Emitter(start)
    o0 = opt == "O0"
    gcc = compiler == "gcc"
    acc, acc64 = ("ebx", "rbx") if gcc else ("r14d", "r14")
    base = "r12" if gcc else "r15"
    frame = 0x10 * (2 + len(stmts) // 2)
    canary = any(s[0] == "canary" for s in stmts)

    if o0:
        e("push rbp")
        e("mov rbp, rsp")
        e(f"sub rsp, {frame:#x}")
        e("mov dword ptr [rbp-0x14], edi")
        e("mov qword ptr [rbp-0x20], rsi")
        if not gcc:
            e("mov dword ptr [rbp-0x4], 0x0")
    else:
        e(f"push {acc64}")
        e(f"push {base}")
        if not gcc:
            e("push rax")
        e(f"mov {acc}, edi")
        e(f"mov {base}, rsi")

    def load_acc():
        if o0:
            e("mov eax, dword ptr [rbp-0x14]")
            return "eax"
        return acc

    def store_acc():
        if o0:
            e("mov dword ptr [rbp-0x14], eax")

    for s in stmts:
        kind = s[0]
        if kind == "canary":
            e("mov rax, qword ptr fs:0x28")
            e("mov qword ptr [rbp-0x8], rax" if o0 else "mov qword ptr [rsp+0x8], rax")
            e("xor eax, eax")
        elif kind == "libc":
            if o0:
                e("mov rax, qword ptr [rbp-0x20]")
                e("mov rdi, rax")
            else:
                e(f"mov rdi, {base}")
            e(f"call {_plt(s[1]):#x} <{s[1]}@plt>")
            if not o0 and opt != "O1":
                e(f"mov {base}, rax")
        elif kind == "extern":
            e(f"mov edi, {load_acc()}")
            e(f"call {_plt(s[1]):#x} <{s[1]}@plt>")
        elif kind == "inner":
            e(f"mov edi, {load_acc()}")
            e(f"call {func_starts[s[1]]:#x}")
            if o0:
                e("mov dword ptr [rbp-0x18], eax")
            else:
                e(f"add {acc}, eax")
        elif kind == "recurse":
            e(f"mov edi, {load_acc()}")
            e(f"call {start:#x}")
        elif kind == "global":
            addr = BSS[0] + s[1]
            if o0 or not gcc:
                e(f"mov eax, dword ptr [rip+{addr - e.pc - 6:#x}]  # {addr:#x}")
                e("add eax, 0x1")
                e(f"mov dword ptr [rip+{addr - e.pc - 6:#x}], eax  # {addr:#x}")
            else:
                e(f"add dword ptr [rip+{addr - e.pc - 7:#x}], 0x1  # {addr:#x}")
            if opt == "O3":
                e(f"mov eax, {addr:#x}")
        elif kind == "data":
            addr = DATA[0] + s[1]
            e(f"mov rax, qword ptr [rip+{addr - e.pc - 7:#x}]  # {addr:#x}")
            e("mov qword ptr [rbp-0x28], rax" if o0 else f"mov qword ptr [{base}], rax")
        elif kind == "string":
            addr = RODATA[0] + 0x20 * s[1]
            if gcc or o0:
                e(f"mov edi, {addr:#x}")
            else:
                e(f"movabs rdi, {addr:#x}")
            e(f"call {_plt('puts'):#x} <puts@plt>")
        elif kind == "arith":
            _, op, c = s
            r = load_acc()
            if op == "add" and gcc and not o0:
                e(f"lea {r}, [{acc64}+{c:#x}]")
            elif op == "shl":
                e(f"shl {r}, {c % 8 + 1:#x}")
            else:
                e(f"{op} {r}, {c:#x}")
            store_acc()
        elif kind == "branch":
            _, cond, c = s
            if o0:
                e(f"cmp dword ptr [rbp-0x14], {c:#x}")
            elif c == 0:
                e(f"test {acc}, {acc}")
            else:
                e(f"cmp {acc}, {c:#x}")
            target = e.pc + 4 * (3 if o0 else 2)
            e(f"j{cond} {target:#x}")
            if o0:
                e("mov dword ptr [rbp-0x14], 0x0")
                e("mov eax, dword ptr [rbp-0x14]")
            else:
                e(f"xor {acc}, {acc}" if opt != "O1" else f"mov {acc}, 0x0")
        elif kind == "loop":
            scale = s[1]
            width = {1: "byte", 2: "word", 4: "dword", 8: "qword"}[scale]
            reg = {1: "al", 2: "ax", 4: "eax", 8: "rax"}[scale]
            if o0:
                e("mov dword ptr [rbp-0x1c], 0x0")
                top = e.pc
                e("mov eax, dword ptr [rbp-0x1c]")
                e("cdqe")
                e("mov rdx, qword ptr [rbp-0x20]")
                e(f"mov {reg}, {width} ptr [rdx+rax*{scale}]")
                e("add dword ptr [rbp-0x1c], 0x1")
                e("cmp dword ptr [rbp-0x1c], 0x9")
                e(f"jle {top:#x}")
            else:
                e("xor ecx, ecx")
                top = e.pc
                unroll = 2 if opt == "O3" else 1
                for u in range(unroll):
                    idx = "rcx" if u == 0 else "rdx"
                    if u:
                        e("lea rdx, [rcx+0x1]")
                    e(f"mov {reg}, {width} ptr [{base}+{idx}*{scale}]")
                e(f"add rcx, {unroll:#x}")
                e("cmp rcx, 0xa")
                e(f"jne {top:#x}")
        elif kind == "field":
            off = s[1]
            if o0:
                e("mov rax, qword ptr [rbp-0x20]")
                e(f"mov qword ptr [rax+{off:#x}], rdx" if off else "mov qword ptr [rax], rdx")
            else:
                e(f"mov qword ptr [{base}+{off:#x}], {acc64}" if off else f"mov qword ptr [{base}], {acc64}")

    if canary:
        e("mov rax, qword ptr [rbp-0x8]" if o0 else "mov rax, qword ptr [rsp+0x8]")
        e("xor rax, qword ptr fs:0x28" if gcc else "sub rax, qword ptr fs:0x28")
        e(f"je {e.pc + 8:#x}")
        e(f"call {_plt('__stack_chk_fail'):#x} <__stack_chk_fail@plt>")
    if o0:
        e("mov eax, dword ptr [rbp-0x14]")
        if gcc:
            e("leave")
        else:
            e(f"add rsp, {frame:#x}")
            e("pop rbp")
    else:
        e(f"mov eax, {acc}")
        if not gcc:
            e("add rsp, 0x8")
        e(f"pop {base}")
        e(f"pop {acc64}")
    e("ret")
    return e.text()


def _with_blocks(rec):
    """Assign basic-block ids: a new block starts after every jump, call or ret."""
    out, bb = [], 0
    for ins in rec.instructions:
        out.append(dataclasses.replace(ins, bb=bb))
        word = ins.mnemonic.split()[-1]
        if word.startswith("j") or word in ("call", "ret"):
            bb += 1
    return dataclasses.replace(rec, instructions=tuple(out))


def fixture_records(functions_per_program=10, programs=PROGRAMS, compilers=COMPILERS, opt_levels=OPT_LEVELS):
    """FunctionRecords for every function of every program in every build."""
    hints = _hints()
    records = []
    for p_idx, (testsuite, binary) in enumerate(programs):
        names = [f"{binary}_fn{i}" if i else "main" for i in range(functions_per_program)]
        starts = [TEXT[0] + 0x4000 * p_idx + 0x200 * i for i in range(functions_per_program)]
        for compiler in compilers:
            for opt in opt_levels:
                for i, name in enumerate(names):
                    stmts = _program(testsuite, binary, name, functions_per_program)
                    text = _render(stmts, compiler, opt, starts[i], starts)
                    rec = parse_asm_text(text, hints, binary_id=f"{binary}-{compiler}-{opt}",
                                         testsuite=testsuite, compiler=compiler, opt_level=opt,
                                         function_name=name, start=starts[i])
                    records.append(_with_blocks(rec))
    return records


# --------------------------------------------------------------------------
# token-level toy corpora

IDIOMS = (
    ("push_bp8", "mov_bp8_sp8", "sub_sp8_immval", "mov_dwordptr[bp8-disp]_reg4", "mov_qwordptr[bp8-disp]_reg8"),
    ("mov_reg8_qwordptr[bp8-disp]", "mov_reg8_reg8", "call_libcstrlen", "mov_dwordptr[bp8-8]_reg4", "add_reg8_immval"),
    ("mov_reg4_dispstr", "call_libcputs", "test_reg4_reg4", "je_jmpdst", "mov_reg4_immval"),
    ("cmp_reg4_immval", "jg_jmpdst", "lea_reg8_[reg8+reg8*8]", "shl_reg8_immval", "movsxd_reg8_reg4"),
    ("mov_reg8_qwordptr[reg8+disp]", "call_innerfunc", "mov_reg4_dwordptr[reg8+8]", "cdqe", "sub_reg4_reg4"),
    ("xor_reg4_reg4", "mov_reg8_qwordptrfs:[disp]", "mov_qwordptr[sp8+disp]_reg8", "pop_reg8", "setne_reg1"),
    ("movzx_reg4_byteptr[reg8]", "and_reg4_immval", "cmp_reg1_immval", "jne_jmpdst", "add_reg4_reg4"),
    ("mov_reg4_dispbss", "call_externfunc", "mov_qwordptr[reg8]_dispdata", "jmp_jmpdst", "lea_reg8_[bp8-disp]"),
    ("mov_reg8_qwordptr[ip8+disp]", "movapd_regxmm_regxmm", "mulsd_regxmm_regxmm", "addsd_regxmm_regxmm", "pxor_regxmm_regxmm"),
)
EPILOGUE = ("mov_reg4_dwordptr[bp8-disp]", "leave", "ret")
MOTIF = ("call_libcmalloc", "mov_qwordptr[reg8+8]_reg8", "call_self", "sar_reg8_immval")
GCC_IDIOM = ("push_reg8", "mov_reg4_reg4", "leave", "ret")
CLANG_IDIOM = ("push_reg8", "add_sp8_immval", "pop_bp8", "ret")


def toy_tokens(rng, n_idioms=(2, 8)):
    chosen = rng.integers(1, len(IDIOMS), size=int(rng.integers(*n_idioms)))
    tokens = list(IDIOMS[0])
    for k in chosen:
        tokens.extend(IDIOMS[int(k)])
    tokens.extend(EPILOGUE)
    return tokens


def _nf(tokens, name, compiler="gcc", opt="O0", consts=()):
    return NormalizedFunction(tokens=tuple(tokens), binary_id="toy", function_name=name,
                              compiler=compiler, opt_level=opt, testsuite="toy", bos_consts=tuple(consts))


def toy_mlm_corpus(n_functions=200, seed=0, motif_rate=0.3):
    """Functions built from fixed 5-token idioms, so every token is predictable from its neighbours.

    A fraction ``motif_rate`` of them also carries the similarity motif at an
    idiom boundary, so the motif tokens are in the vocabulary and seen in
    pre-training.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_functions):
        tokens = toy_tokens(rng)
        if rng.random() < motif_rate:
            at = len(IDIOMS[0]) * int(rng.integers(1, (len(tokens) - len(EPILOGUE)) // len(IDIOMS[0]) + 1))
            tokens = tokens[:at] + list(MOTIF) + tokens[at:]
        out.append(_nf(tokens, f"f{i}"))
    return out


def _insert(tokens, motif, rng):
    at = int(rng.integers(1, len(tokens) - 1))
    return tokens[:at] + list(motif) + tokens[at:]


def toy_pair_corpus(n_pairs=100, seed=0):
    """Similarity pairs where positives share a planted motif.

    Positives carry the motif in both functions; negatives carry it in
    neither or in exactly one. BoS similarity is uniform noise.
    """
    from .corpus import PairExample

    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n_pairs):
        label = int(i % 2 == 0)
        a, b = toy_tokens(rng, (2, 5)), toy_tokens(rng, (2, 5))
        if label:
            a, b = _insert(a, MOTIF, rng), _insert(b, MOTIF, rng)
        elif rng.random() < 0.5:
            if rng.random() < 0.5:
                a = _insert(a, MOTIF, rng)
            else:
                b = _insert(b, MOTIF, rng)
        pairs.append(PairExample(tuple(a), tuple(b), float(rng.random()), label, "(TOY,TOY)"))
    order = rng.permutation(n_pairs)
    return [pairs[k] for k in order]


def toy_toolchain_corpus(n_functions=100, seed=0):
    """Two-class compiler examples: each class ends with its own epilogue idiom."""
    from .corpus import ToolchainExample

    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_functions):
        label = i % 2
        tokens = toy_tokens(rng, (2, 5))[:-len(EPILOGUE)] + list(CLANG_IDIOM if label else GCC_IDIOM)
        out.append(ToolchainExample(tuple(tokens), label, ("gcc", "clang")[label]))
    order = rng.permutation(n_functions)
    return [out[k] for k in order]


def toy_vocab_tokens():
    toks = {t for idiom in IDIOMS for t in idiom}
    toks.update(EPILOGUE, MOTIF, GCC_IDIOM, CLANG_IDIOM)
    return sorted(toks)
