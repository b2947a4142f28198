"""Canonical JSONL representation of disassembled functions.

Each line of an ingest file holds one function::

    {"binary_id": "find", "testsuite": "gnutils", "compiler": "gcc",
     "opt_level": "O0", "function_name": "main",
     "instructions": [{"address": 4198400, "mnemonic": "mov", "bb": 0,
                       "operands": [{"raw": "eax", "kind": "reg"},
                                    {"raw": "0x38", "kind": "imm", "value": 56}]}],
     "bos_consts": [56], "bos_strings": []}

``parse_asm_text`` is a best-effort adapter for Intel-syntax listings that
derives reference classes from a :class:`SectionMap`.
"""

import enum
import io
import json
import logging
import re
import warnings
from dataclasses import dataclass, field

from . import x86
from .errors import SchemaError, ValidationError

log = logging.getLogger(__name__)


class RefClass(str, enum.Enum):
    LIBC = "libc"
    SELF = "self"
    INNER = "inner"
    EXTERN = "extern"
    JMP = "jmp"
    STR = "str"
    BSS = "bss"
    DATA = "data"
    NONE = "none"


class OperandKind(str, enum.Enum):
    IMM = "imm"
    REG = "reg"
    MEM = "mem"


OPT_LEVELS = ("O0", "O1", "O2", "O3", "unknown")


class AmbiguousReferenceWarning(UserWarning):
    """An immediate or displacement matched more than one section hint."""


@dataclass(frozen=True)
class MemExpr:
    base: str | None = None
    index: str | None = None
    scale: int | None = None
    disp: int | None = None
    disp_ref: RefClass = RefClass.NONE

    def __post_init__(self):
        if self.scale is not None and self.scale not in (1, 2, 4, 8):
            raise ValidationError(f"invalid scale {self.scale}")


@dataclass(frozen=True)
class OperandMeta:
    raw: str
    kind: OperandKind
    value: int | None = None
    size: int | None = None
    ref: RefClass = RefClass.NONE
    ref_name: str | None = None
    seg: str | None = None
    mem: MemExpr | None = None

    def __post_init__(self):
        if self.kind is OperandKind.IMM:
            if self.value is None:
                raise ValidationError(f"immediate operand {self.raw!r} has no value")
            if self.mem is not None:
                raise ValidationError(f"immediate operand {self.raw!r} carries a memory expression")
        if self.kind is OperandKind.MEM and self.mem is None:
            raise ValidationError(f"memory operand {self.raw!r} has no memory expression")
        if self.size is not None and self.size not in x86.VALID_SIZES:
            raise ValidationError(f"invalid operand size {self.size}")


@dataclass(frozen=True)
class InstructionRecord:
    address: int
    mnemonic: str
    operands: tuple = ()
    bb: int | None = None

    def __post_init__(self):
        if not self.mnemonic or not self.mnemonic.strip():
            raise ValidationError("empty mnemonic")


@dataclass(frozen=True)
class FunctionRecord:
    binary_id: str
    testsuite: str
    compiler: str
    opt_level: str
    function_name: str
    instructions: tuple = ()
    bos_consts: tuple = ()
    bos_strings: tuple = ()

    @property
    def build(self):
        return (self.compiler, self.opt_level)


# --------------------------------------------------------------------------
# JSONL


def _require(obj, key, typ, path, line):
    if key not in obj:
        raise SchemaError(f"missing field {key}{path}", line=line)
    val = obj[key]
    if typ is int and isinstance(val, bool):
        raise SchemaError(f"field {key}{path} must be int", line=line)
    if not isinstance(val, typ):
        raise SchemaError(f"field {key}{path} must be {typ.__name__}", line=line)
    return val


def _optional(obj, key, typ, path, line):
    val = obj.get(key)
    if val is None:
        return None
    if (typ is int and isinstance(val, bool)) or not isinstance(val, typ):
        raise SchemaError(f"field {key}{path} must be {typ.__name__}", line=line)
    return val


def _ref(literal, path, line):
    if literal is None:
        return RefClass.NONE
    try:
        return RefClass(literal)
    except ValueError:
        raise SchemaError(f"unknown ref literal {literal!r}{path}", line=line) from None


def _operand_from_dict(d, path, line):
    if not isinstance(d, dict):
        raise SchemaError(f"operand{path} must be an object", line=line)
    raw = _require(d, "raw", str, path, line)
    kind_lit = _require(d, "kind", str, path, line)
    try:
        kind = OperandKind(kind_lit)
    except ValueError:
        raise SchemaError(f"unknown operand kind {kind_lit!r}{path}", line=line) from None
    mem = None
    if d.get("mem") is not None:
        m = d["mem"]
        if not isinstance(m, dict):
            raise SchemaError(f"field mem{path} must be an object", line=line)
        mpath = f"{path}.mem"
        fields = dict(
            base=_optional(m, "base", str, mpath, line),
            index=_optional(m, "index", str, mpath, line),
            scale=_optional(m, "scale", int, mpath, line),
            disp=_optional(m, "disp", int, mpath, line),
            disp_ref=_ref(m.get("disp_ref"), mpath, line),
        )
        try:
            mem = MemExpr(**fields)
        except ValidationError as e:
            raise SchemaError(f"{e}{mpath}", line=line) from None
    try:
        return OperandMeta(
            raw=raw,
            kind=kind,
            value=_optional(d, "value", int, path, line),
            size=_optional(d, "size", int, path, line),
            ref=_ref(d.get("ref"), path, line),
            ref_name=_optional(d, "ref_name", str, path, line),
            seg=_optional(d, "seg", str, path, line),
            mem=mem,
        )
    except SchemaError:
        raise
    except ValidationError as e:
        raise SchemaError(f"{e}{path}", line=line) from None


def record_from_dict(obj, line=None):
    if not isinstance(obj, dict):
        raise SchemaError("record must be a JSON object", line=line)
    header = {k: _require(obj, k, str, "", line)
              for k in ("binary_id", "testsuite", "compiler", "opt_level", "function_name")}
    if header["opt_level"] not in OPT_LEVELS:
        raise SchemaError(f"unknown opt_level literal {header['opt_level']!r}", line=line)
    ins_list = _require(obj, "instructions", list, "", line)
    instructions = []
    for i, ins in enumerate(ins_list):
        path = f" at instruction {i}"
        if not isinstance(ins, dict):
            raise SchemaError(f"instruction{path} must be an object", line=line)
        address = _require(ins, "address", int, path, line)
        mnemonic = _require(ins, "mnemonic", str, path, line)
        if not mnemonic.strip():
            raise SchemaError(f"empty mnemonic{path}", line=line)
        ops = _optional(ins, "operands", list, path, line) or []
        operands = tuple(_operand_from_dict(op, f"{path} operand {j}", line) for j, op in enumerate(ops))
        instructions.append(InstructionRecord(address, mnemonic, operands,
                                              _optional(ins, "bb", int, path, line)))
    consts = _optional(obj, "bos_consts", list, "", line) or []
    strings = _optional(obj, "bos_strings", list, "", line) or []
    if not all(isinstance(c, int) and not isinstance(c, bool) for c in consts):
        raise SchemaError("field bos_consts must hold integers", line=line)
    if not all(isinstance(s, str) for s in strings):
        raise SchemaError("field bos_strings must hold strings", line=line)
    return FunctionRecord(instructions=tuple(instructions), bos_consts=tuple(consts),
                          bos_strings=tuple(strings), **header)


def _drop_none(d):
    return {k: v for k, v in d.items() if v is not None}


def operand_to_dict(op):
    d = {"raw": op.raw, "kind": op.kind.value, "value": op.value, "size": op.size,
         "ref": None if op.ref is RefClass.NONE else op.ref.value,
         "ref_name": op.ref_name, "seg": op.seg}
    if op.mem is not None:
        m = op.mem
        d["mem"] = _drop_none({"base": m.base, "index": m.index, "scale": m.scale, "disp": m.disp,
                               "disp_ref": None if m.disp_ref is RefClass.NONE else m.disp_ref.value})
    return _drop_none(d)


def record_to_dict(rec):
    instructions = []
    for ins in rec.instructions:
        d = {"address": ins.address, "mnemonic": ins.mnemonic,
             "operands": [operand_to_dict(op) for op in ins.operands]}
        if ins.bb is not None:
            d["bb"] = ins.bb
        instructions.append(d)
    return {
        "binary_id": rec.binary_id,
        "testsuite": rec.testsuite,
        "compiler": rec.compiler,
        "opt_level": rec.opt_level,
        "function_name": rec.function_name,
        "instructions": instructions,
        "bos_consts": list(rec.bos_consts),
        "bos_strings": list(rec.bos_strings),
    }


def _lines(stream):
    if isinstance(stream, (bytes, bytearray)):
        stream = io.BytesIO(stream)
    elif isinstance(stream, str):
        stream = io.StringIO(stream)
    for line in stream:
        if isinstance(line, (bytes, bytearray)):
            line = line.decode("utf-8")
        yield line


def parse_records(stream):
    """Parse a JSONL stream (bytes, str or file object) into FunctionRecords.

    Blank lines are skipped; line numbers in errors are 1-based.
    """
    records = []
    for lineno, line in enumerate(_lines(stream), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise SchemaError(f"malformed JSON: {e.msg}", line=lineno) from None
        records.append(record_from_dict(obj, line=lineno))
    return records


def check_unique(records):
    """Reject two records sharing (binary_id, function_name) under one build."""
    seen = {}
    for i, rec in enumerate(records):
        key = (rec.binary_id, rec.function_name, rec.compiler, rec.opt_level)
        if key in seen:
            raise ValidationError(
                f"function {rec.function_name!r} of {rec.binary_id!r} appears twice "
                f"(records {seen[key]} and {i})")
        seen[key] = i
    return records


def dump_records(records, fp):
    for rec in records:
        fp.write(json.dumps(record_to_dict(rec), separators=(",", ":")) + "\n")


def serialize_records(records):
    buf = io.StringIO()
    dump_records(records, buf)
    return buf.getvalue()


def load_records(path):
    with open(path, "rb") as fp:
        return parse_records(fp)


def save_records(records, path):
    with open(path, "w", encoding="utf-8") as fp:
        dump_records(records, fp)


# --------------------------------------------------------------------------
# Intel-syntax adapter


@dataclass
class SectionMap:
    """Address-range hints for ``parse_asm_text``.

    Ranges are half-open ``(start, end)`` pairs. ``symbols`` maps addresses to
    names and ``libc_names`` lists symbols that classify as libc calls; without
    it external calls stay ``extern``.
    """

    text: list = field(default_factory=list)
    plt_got: list = field(default_factory=list)
    bss: list = field(default_factory=list)
    data: list = field(default_factory=list)
    rodata_string: list = field(default_factory=list)
    symbols: dict = field(default_factory=dict)
    strings: dict = field(default_factory=dict)
    libc_names: frozenset = frozenset()

    @classmethod
    def from_dict(cls, d):
        def ranges(key):
            return [tuple(_int(x) for x in r) for r in d.get(key, [])]

        return cls(
            text=ranges("text"),
            plt_got=ranges("plt_got"),
            bss=ranges("bss"),
            data=ranges("data"),
            rodata_string=ranges("rodata_string"),
            symbols={_int(k): v for k, v in d.get("symbols", {}).items()},
            strings={_int(k): v for k, v in d.get("strings", {}).items()},
            libc_names=frozenset(d.get("libc_names", [])),
        )

    def sections_of(self, addr):
        hits = []
        for name in ("text", "plt_got", "bss", "data", "rodata_string"):
            if any(lo <= addr < hi for lo, hi in getattr(self, name)):
                hits.append(name)
        return hits


_SECTION_REF = {"rodata_string": RefClass.STR, "bss": RefClass.BSS, "data": RefClass.DATA}


def _int(tok):
    if isinstance(tok, int):
        return tok
    tok = tok.strip().lower()
    neg = tok.startswith("-")
    if neg:
        tok = tok[1:]
    if tok.startswith("0x"):
        v = int(tok, 16)
    elif tok.endswith("h") and re.fullmatch(r"[0-9a-f]+h", tok):
        v = int(tok[:-1], 16)
    else:
        v = int(tok, 10)
    return -v if neg else v


_NUM_RE = re.compile(r"^-?(0x[0-9a-f]+|[0-9a-f]+h|[0-9]+)$")
_PTR_RE = re.compile(r"^(?:(\w+)\s+ptr\s+|ptr\s+)?(?:(\w\w):)?(.*)$")
_ADDR_PREFIX_RE = re.compile(r"^\s*(?:0x)?([0-9a-f]+):\s*")
_SYMBOL_RE = re.compile(r"<([^>]+)>")


def _split_operands(text):
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch in "[(":
            depth += 1
        elif ch in "])":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    if "".join(cur).strip():
        parts.append("".join(cur).strip())
    return parts


def _parse_mem_expr(expr, raw):
    base = index = scale = None
    disp = None
    terms = re.findall(r"([+-]?)\s*([^+-]+)", expr.replace(" ", ""))
    if not terms:
        raise ValidationError(f"unparseable operand {raw!r}")
    for sign, term in terms:
        if "*" in term:
            reg, sc = term.split("*", 1)
            if not x86.is_register(reg) or not _NUM_RE.match(sc):
                raise ValidationError(f"unparseable operand {raw!r}")
            index, scale = x86.canonical_register(reg), _int(sc)
        elif x86.is_register(term) and sign != "-":
            reg = x86.canonical_register(term)
            if base is None:
                base = reg
            elif index is None:
                index, scale = reg, 1
            else:
                raise ValidationError(f"unparseable operand {raw!r}")
        elif _NUM_RE.match(term):
            v = _int(term)
            disp = (disp or 0) + (-v if sign == "-" else v)
        else:
            raise ValidationError(f"unparseable operand {raw!r}")
    if scale is not None and scale not in (1, 2, 4, 8):
        raise ValidationError(f"unparseable operand {raw!r}: scale {scale}")
    return MemExpr(base=base, index=index, scale=scale, disp=disp)


def parse_operand(text):
    """Parse one Intel-syntax operand into an ``OperandMeta`` without reference info."""
    raw = text.strip()
    low = re.sub(r"\s+", " ", raw.lower())
    low = _SYMBOL_RE.sub("", low).strip()
    if x86.is_register(low):
        return OperandMeta(raw=raw, kind=OperandKind.REG)
    m = _PTR_RE.match(low)
    word, seg, rest = m.group(1), m.group(2), m.group(3).strip()
    if word is not None and word not in x86.WORD_SIZES:
        raise ValidationError(f"unparseable operand {raw!r}")
    if seg is not None and seg not in x86.SEGMENTS:
        raise ValidationError(f"unparseable operand {raw!r}")
    size = x86.WORD_SIZES.get(word) if word else None
    if rest.startswith("[") and rest.endswith("]"):
        mem = _parse_mem_expr(rest[1:-1], raw)
        return OperandMeta(raw=raw, kind=OperandKind.MEM, size=size, seg=seg, mem=mem)
    if seg is not None and _NUM_RE.match(rest):
        return OperandMeta(raw=raw, kind=OperandKind.MEM, size=size, seg=seg,
                           mem=MemExpr(disp=_int(rest)))
    if word is None and seg is None and _NUM_RE.match(rest):
        return OperandMeta(raw=raw, kind=OperandKind.IMM, value=_int(rest))
    raise ValidationError(f"unparseable operand {raw!r}")


def _classify_address(addr, hints, what):
    hits = hints.sections_of(addr)
    if len(hits) > 1:
        warnings.warn(f"{what} {addr:#x} matches sections {hits}", AmbiguousReferenceWarning, stacklevel=3)
    return hits


def _call_ref(addr, hints, func_start, symbol):
    hits = _classify_address(addr, hints, "call target")
    name = symbol or hints.symbols.get(addr)
    if name is not None:
        name = name.split("@", 1)[0]
    if "plt_got" in hits:
        if name is not None and name in hints.libc_names:
            return RefClass.LIBC, name
        return RefClass.EXTERN, None
    if "text" in hits:
        if addr == func_start:
            return RefClass.SELF, None
        return RefClass.INNER, None
    return RefClass.NONE, None


def _data_ref(addr, hints, what):
    # call > jump > reference > default; data-section order follows the table
    for name in _classify_address(addr, hints, what):
        if name in _SECTION_REF:
            return _SECTION_REF[name]
    return RefClass.NONE


def parse_asm_text(text, hints=None, *, binary_id="", testsuite="", compiler="other",
                   opt_level="unknown", function_name="", start=None):
    """Parse an Intel-syntax listing of one function into a FunctionRecord.

    Lines look like ``401000: mov eax, 0x38`` (address prefix optional).
    objdump-style ``<sym@plt>`` annotations name call targets and a trailing
    ``# 0x404040`` comment gives the resolved target of rip-relative operands.
    ``start`` defaults to the address of the first instruction.
    """
    hints = hints or SectionMap()
    instructions, consts, strings = [], [], []
    next_addr = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith(";"):
            continue
        comment_target = None
        if "#" in line:
            line, comment = line.split("#", 1)
            m = re.search(r"0x[0-9a-fA-F]+", comment)
            if m:
                comment_target = int(m.group(0), 16)
        m = _ADDR_PREFIX_RE.match(line.lower())
        if m:
            address = int(m.group(1), 16)
            line = line[m.end():]
        else:
            address = next_addr
        next_addr = address + 1
        if start is None:
            start = address
        symbol_m = _SYMBOL_RE.search(line)
        symbol = symbol_m.group(1) if symbol_m else None
        body = _SYMBOL_RE.sub("", line).strip()
        # mnemonic (with prefixes) runs until the first operand-looking token
        words = body.split(None, 1)
        mnemonic = words[0].lower()
        rest = words[1] if len(words) > 1 else ""
        while rest and mnemonic.split()[-1] in x86.PREFIXES:
            nxt = rest.split(None, 1)
            mnemonic += " " + nxt[0].lower()
            rest = nxt[1] if len(nxt) > 1 else ""
        try:
            ops = [parse_operand(t) for t in _split_operands(rest)]
        except ValidationError as e:
            raise ValidationError(f"{e} at line {lineno}") from None
        ops = [_annotate(op, i, mnemonic, hints, start, symbol, comment_target, consts, strings)
               for i, op in enumerate(ops)]
        instructions.append(InstructionRecord(address, mnemonic, tuple(ops)))
    return FunctionRecord(binary_id=binary_id, testsuite=testsuite, compiler=compiler,
                          opt_level=opt_level, function_name=function_name,
                          instructions=tuple(instructions), bos_consts=tuple(consts),
                          bos_strings=tuple(strings))


def _annotate(op, position, mnemonic, hints, func_start, symbol, comment_target, consts, strings):
    if op.kind is OperandKind.IMM:
        if position == 0 and x86.is_call(mnemonic):
            ref, name = _call_ref(op.value, hints, func_start, symbol)
            if ref is not RefClass.NONE:
                return OperandMeta(op.raw, op.kind, value=op.value, ref=ref, ref_name=name)
        if position == 0 and x86.is_jump(mnemonic):
            return OperandMeta(op.raw, op.kind, value=op.value, ref=RefClass.JMP)
        ref = _data_ref(op.value, hints, "immediate")
        if ref is RefClass.STR and op.value in hints.strings:
            strings.append(hints.strings[op.value])
        elif ref is RefClass.NONE:
            consts.append(op.value)
        return OperandMeta(op.raw, op.kind, value=op.value, ref=ref)
    if op.kind is OperandKind.MEM and op.mem.disp is not None:
        m = op.mem
        if m.base in ("rip", "eip"):
            target = comment_target
        elif m.base is None and m.index is None and op.seg is None:
            target = m.disp
        else:
            target = None
        if target is None:
            return op
        ref = _data_ref(target, hints, "displacement")
        if ref is RefClass.STR and target in hints.strings:
            strings.append(hints.strings[target])
        mem = MemExpr(m.base, m.index, m.scale, m.disp, ref)
        return OperandMeta(op.raw, op.kind, size=op.size, seg=op.seg, mem=mem)
    return op
