"""Normalized x86-64 instruction tokens, a masked-language-model encoder and
fine-tuning heads for function similarity and toolchain provenance."""

__version__ = "0.1.0"
