"""
hashswap
========

Locate weak hash routines in stripped x86-64 ELF executables and replace
them with SHA-256: identify, scope, rewrite.
"""

__version__ = "0.1.0"
