"""x86-64 register table and mnemonic families."""

import re

# name -> normalized register token
REGISTERS = {}


def _add(names, token):
    for name in names:
        REGISTERS[name] = token


_GP = {
    8: ["rax", "rbx", "rcx", "rdx", "rsi", "rdi"],
    4: ["eax", "ebx", "ecx", "edx", "esi", "edi"],
    2: ["ax", "bx", "cx", "dx", "si", "di"],
    1: ["al", "bl", "cl", "dl", "ah", "bh", "ch", "dh", "sil", "dil"],
}
for _w, _names in _GP.items():
    _add(_names, f"reg{_w}")

for _n in range(8, 16):
    _add([f"r{_n}"], "reg8")
    _add([f"r{_n}d"], "reg4")
    _add([f"r{_n}w"], "reg2")
    _add([f"r{_n}b", f"r{_n}l"], "reg1")

# stack, base and instruction pointers keep their role
for _p in ("s", "b"):
    _add([f"r{_p}p"], f"{_p}p8")
    _add([f"e{_p}p"], f"{_p}p4")
    _add([f"{_p}p"], f"{_p}p2")
    _add([f"{_p}pl"], f"{_p}p1")
_add(["rip"], "ip8")
_add(["eip"], "ip4")
_add(["ip"], "ip2")

for _n in range(16):
    _add([f"cr{_n}"], "regcr")
    _add([f"dr{_n}"], "regdr")
_add(["st"] + [f"st{_n}" for _n in range(8)] + [f"st({_n})" for _n in range(8)], "regst")

for _s in "cdefgs":
    _add([f"{_s}s"], f"reg{_s}s")

for _n in range(8):
    _add([f"mm{_n}"], "regmm")
for _n in range(32):
    _add([f"xmm{_n}"], "regxmm")
    _add([f"ymm{_n}"], "regymm")
    _add([f"zmm{_n}"], "regzmm")

SEGMENTS = frozenset(["cs", "ds", "es", "fs", "gs", "ss"])

# operand size in bytes -> pointer word
SIZE_WORDS = {
    1: "byte",
    2: "word",
    4: "dword",
    8: "qword",
    10: "tbyte",
    16: "xmmword",
    32: "ymmword",
    64: "zmmword",
}
WORD_SIZES = {w: s for s, w in SIZE_WORDS.items()}
WORD_SIZES["xword"] = 16
WORD_SIZES["oword"] = 16
VALID_SIZES = frozenset(SIZE_WORDS)

PREFIXES = frozenset(["rep", "repe", "repz", "repne", "repnz", "lock", "bnd", "notrack", "data16", "addr32"])


def canonical_register(name):
    return name.strip().lower().replace(" ", "")


def is_register(name):
    return canonical_register(name) in REGISTERS


def base_mnemonic(mnemonic):
    """Mnemonic with instruction prefixes (rep, lock, bnd, ...) stripped."""
    parts = mnemonic.lower().split()
    while len(parts) > 1 and parts[0] in PREFIXES:
        parts = parts[1:]
    return parts[-1] if parts else ""


def is_call(mnemonic):
    return base_mnemonic(mnemonic) in ("call", "callq")


_JUMP_RE = re.compile(r"^(j[a-z]+|loop[a-z]*)$")


def is_jump(mnemonic):
    return bool(_JUMP_RE.match(base_mnemonic(mnemonic)))
