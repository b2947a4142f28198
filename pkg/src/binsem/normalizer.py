"""Instruction normalization: one x86-64 instruction becomes one token.

Three granularities are supported:

* ``balanced`` keeps register roles and widths, reference classes of
  immediates (libc / self / innerfunc / externfunc / jmpdst / dispstr /
  dispbss / dispdata / immval) and the shape of memory expressions.
* ``coarse`` normalizes registers only; every immediate becomes ``immval``
  and every memory operand ``ptr``.
* ``fine`` replaces immediates with ``immval`` and keeps everything else
  close to the disassembly text.

The mnemonic is never rewritten apart from dropping whitespace.
"""

import enum
import json
import re
from dataclasses import dataclass

from . import x86
from .errors import SchemaError, ValidationError
from .ingest import FunctionRecord, OperandKind, RefClass

TOKEN_RE = re.compile(r"^[a-z0-9]+(_([a-z0-9\[\]+*:.-]+))*$")
SMALL_DISP = 8


class NormMode(str, enum.Enum):
    BALANCED = "balanced"
    COARSE = "coarse"
    FINE = "fine"


class Context(enum.Enum):
    CALL_TARGET = "call_target"
    JUMP_TARGET = "jump_target"
    OTHER = "other"


class NormalizationError(ValidationError):
    pass


@dataclass(frozen=True)
class NormalizedFunction:
    tokens: tuple
    binary_id: str
    function_name: str
    compiler: str
    opt_level: str
    testsuite: str = ""
    bos_consts: tuple = ()
    bos_strings: tuple = ()

    @property
    def build(self):
        return (self.compiler, self.opt_level)

    def to_dict(self):
        return {
            "id": {"binary_id": self.binary_id, "function_name": self.function_name,
                   "compiler": self.compiler, "opt_level": self.opt_level,
                   "testsuite": self.testsuite},
            "tokens": list(self.tokens),
            "bos_consts": list(self.bos_consts),
            "bos_strings": list(self.bos_strings),
        }

    @classmethod
    def from_dict(cls, d):
        ident = d["id"]
        return cls(tokens=tuple(d["tokens"]), binary_id=ident["binary_id"],
                   function_name=ident["function_name"], compiler=ident["compiler"],
                   opt_level=ident["opt_level"], testsuite=ident.get("testsuite", ""),
                   bos_consts=tuple(d.get("bos_consts", ())), bos_strings=tuple(d.get("bos_strings", ())))


def normalize_register(name):
    tok = x86.REGISTERS.get(x86.canonical_register(name))
    if tok is None:
        raise NormalizationError(f"unknown register {name!r}")
    return tok


def normalize_immediate(op, ctx):
    """Token for an immediate operand; call > jump > reference > immval."""
    ref = op.ref
    if ctx is Context.CALL_TARGET:
        if ref is RefClass.LIBC:
            if not op.ref_name:
                raise NormalizationError(f"libc reference without a name: {op.raw!r}")
            return "libc" + re.sub(r"[^a-z0-9]", "", op.ref_name.lower())
        if ref is RefClass.SELF:
            return "self"
        if ref is RefClass.INNER:
            return "innerfunc"
        if ref is RefClass.EXTERN:
            return "externfunc"
    if ctx is Context.JUMP_TARGET:
        return "jmpdst"
    if ref is RefClass.STR:
        return "dispstr"
    if ref is RefClass.BSS:
        return "dispbss"
    if ref is RefClass.DATA:
        return "dispdata"
    return "immval"


def _disp_token(disp, disp_ref, small_disp):
    # only string references survive inside a pointer expression
    if disp_ref is RefClass.STR:
        return "dispstr"
    if disp_ref is not RefClass.NONE:
        return "disp"
    if abs(disp) <= small_disp:
        return str(abs(disp))
    return "disp"


def normalize_memory(op, is_lea_src=False, mode=NormMode.BALANCED, small_disp=SMALL_DISP):
    if op.kind is not OperandKind.MEM or op.mem is None:
        raise NormalizationError(f"not a memory operand: {op.raw!r}")
    m = op.mem
    if m.base is None and m.index is None and m.disp is None:
        raise NormalizationError(f"memory operand without base, index or displacement: {op.raw!r}")
    if mode is NormMode.COARSE:
        return "ptr"
    if mode is NormMode.FINE:
        return _verbatim(op.raw)

    expr = ""
    if m.base is not None:
        expr = normalize_register(m.base)
    if m.index is not None:
        idx = normalize_register(m.index)
        if m.scale not in (None, 1):
            idx += f"*{m.scale}"
        expr = f"{expr}+{idx}" if expr else idx
    if m.disp is not None and (m.disp != 0 or not expr):
        tok = _disp_token(m.disp, m.disp_ref, small_disp)
        if not expr:
            expr = tok if m.disp >= 0 or not tok.isdigit() else f"-{tok}"
        else:
            expr += ("-" if m.disp < 0 else "+") + tok
    expr = f"[{expr}]"
    if is_lea_src:
        return expr
    word = _size_word(op)
    prefix = f"{word}ptr" if word else "ptr"
    if op.seg:
        prefix += f"{op.seg.lower()}:"
    return prefix + expr


def _size_word(op):
    head = op.raw.lower().split("ptr", 1)[0].strip() if "ptr" in op.raw.lower() else ""
    if head in x86.WORD_SIZES:
        return head
    if op.size is not None:
        return x86.SIZE_WORDS[op.size]
    return ""


_VERBATIM_DROP = re.compile(r"[^a-z0-9\[\]+*:.-]")


def _verbatim(raw):
    return _VERBATIM_DROP.sub("", raw.lower())


def normalize_operand(op, position, mnemonic, mode=NormMode.BALANCED, small_disp=SMALL_DISP):
    if op.kind is OperandKind.IMM:
        if mode is not NormMode.BALANCED:
            return "immval"
        ctx = Context.OTHER
        if position == 0 and x86.is_call(mnemonic):
            ctx = Context.CALL_TARGET
        elif position == 0 and x86.is_jump(mnemonic):
            ctx = Context.JUMP_TARGET
        return normalize_immediate(op, ctx)
    if op.kind is OperandKind.REG:
        if mode is NormMode.FINE:
            return _verbatim(op.raw)
        return normalize_register(op.raw)
    is_lea_src = x86.base_mnemonic(mnemonic) == "lea" and position == 1
    return normalize_memory(op, is_lea_src, mode, small_disp)


def normalize_instruction(ins, mode=NormMode.BALANCED, small_disp=SMALL_DISP):
    mode = NormMode(mode)
    mnemonic = re.sub(r"\s+", "", ins.mnemonic.lower())
    parts = [mnemonic]
    for i, op in enumerate(ins.operands):
        parts.append(normalize_operand(op, i, ins.mnemonic, mode, small_disp))
    return "_".join(parts)


def normalize_function(f: FunctionRecord, mode=NormMode.BALANCED, small_disp=SMALL_DISP):
    tokens = []
    for i, ins in enumerate(f.instructions):
        try:
            tokens.append(normalize_instruction(ins, mode, small_disp))
        except ValidationError as e:
            raise NormalizationError(f"{f.function_name}: instruction {i}: {e}") from None
    return NormalizedFunction(
        tokens=tuple(tokens), binary_id=f.binary_id, function_name=f.function_name,
        compiler=f.compiler, opt_level=f.opt_level, testsuite=f.testsuite,
        bos_consts=tuple(f.bos_consts), bos_strings=tuple(f.bos_strings),
    )


def load_nfs(path):
    nfs = []
    with open(path, encoding="utf-8") as fp:
        for lineno, line in enumerate(fp, start=1):
            if not line.strip():
                continue
            try:
                nfs.append(NormalizedFunction.from_dict(json.loads(line)))
            except json.JSONDecodeError as e:
                raise SchemaError(f"malformed JSON: {e.msg}", line=lineno) from None
            except (KeyError, TypeError) as e:
                raise SchemaError(f"not a normalized function record: missing {e}", line=lineno) from None
    return nfs


def save_nfs(nfs, path):
    with open(path, "w", encoding="utf-8") as fp:
        for nf in nfs:
            fp.write(json.dumps(nf.to_dict(), separators=(",", ":")) + "\n")
