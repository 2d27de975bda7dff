#!/usr/bin/env python3
"""
hashswap
========

Replace weak hash routines in stripped x86-64 ELF executables with SHA-256.

Phases, each reading the previous phase's report from --reports:
    identify  find weak-hash routines and their parameter layout
    scope     run test inputs and collect every digest-derived buffer
    rewrite   inject the replacement, grow buffers, apply logic edits
    verify    run the original and rewritten binaries side by side

Examples:
    python -m hashswap identify --binary corpus/bin/md5-printer
    python -m hashswap scope --binary corpus/bin/md5-printer --script corpus/hello.script
    python -m hashswap rewrite --binary corpus/bin/md5-printer --out /tmp/printer \\
        --changes corpus/changes/md5-printer.changes
    python -m hashswap verify --binary corpus/bin/md5-printer --out /tmp/printer \\
        --script corpus/hello.script

Exit status: 0 success, 1 user or input error, 2 internal invariant violation.
"""

import argparse
import logging
import os
import sys
import time
from typing import List, Optional, Sequence, Tuple

from hashswap import __version__
from hashswap.bundle import load_bundle, self_test
from hashswap.config import PipelineConfig, build_config
from hashswap.disasm import disassemble
from hashswap.elf import BinaryImage, load
from hashswap.emulator import ExecutionTrace, load_script, prepare_program
from hashswap.errors import ConfigError, ExecutionError, HashswapError, ReportMismatch
from hashswap.identify import Identification, identify
from hashswap.reports import (IDENTIFY_REPORT, SCOPE_REPORT, check_binding, parse_identification, parse_taint,
                              read_report, render_identification, render_taint, write_report)
from hashswap.rewrite import apply, build_changeset, load_changes
from hashswap.signatures import SignatureDB
from hashswap.taint import TaintReport, taint_run, union

logger = logging.getLogger(__name__)

TRACE_TAIL = 8


class Timer:
    def __init__(self, phase: str):
        self.phase = phase

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        logger.info(f"{self.phase} took {self.elapsed:.2f}s")
        return False


def _load_identification(config: PipelineConfig, image: BinaryImage) -> Identification:
    text, path = read_report(config.reports, IDENTIFY_REPORT)
    header, identification = parse_identification(text, path)
    check_binding(header, image.digest, path)
    return identification


def cmd_identify(config: PipelineConfig) -> int:
    config.require('binary')
    image = load(config.binary)
    db = SignatureDB.load(config.signatures)
    with Timer('identify'):
        result = identify(image, db, config.gas)
    text = render_identification(image.digest, result)
    write_report(config.reports, IDENTIFY_REPORT, text)
    print(text, end='')
    if not result.primitives and not result.detected:
        logger.error(f"no weak hash routine or known primitive found in {config.binary}")
        return 1
    return 0


def cmd_scope(config: PipelineConfig) -> int:
    config.require('binary', 'scripts')
    image = load(config.binary)
    identification = _load_identification(config, image)
    if not identification.primitives:
        raise ReportMismatch("the identification report names no weak hash routine")
    program = disassemble(image)
    scripts = [load_script(path) for path in config.scripts]

    reports: List[TaintReport] = []
    with Timer('scope'):
        for primitive in identification.primitives:
            runs = [taint_run(image, primitive, argv, stdin, config.gas, program) for argv, stdin in scripts]
            reports.append(union(runs))
    text = render_taint(image.digest, reports)
    write_report(config.reports, SCOPE_REPORT, text)
    print(text, end='')
    return 0


def _select(reports: Sequence[TaintReport], target: Optional[int]) -> TaintReport:
    if target is not None:
        for report in reports:
            if report.target.entry == target:
                return report
        raise ConfigError(f"no scoped routine at {target:#x}")
    if len(reports) != 1:
        entries = ', '.join(f"{r.target.entry:x}" for r in reports)
        raise ConfigError(f"scope report covers several routines ({entries}); choose one with --target")
    return reports[0]


def cmd_rewrite(config: PipelineConfig) -> int:
    config.require('binary', 'out')
    image = load(config.binary)
    identification = _load_identification(config, image)
    text, path = read_report(config.reports, SCOPE_REPORT)
    header, reports = parse_taint(text, identification.primitives, path)
    check_binding(header, image.digest, path)
    report = _select(reports, config.target)

    bundle = load_bundle(config.bundle)
    self_test(bundle)
    changeset = build_changeset(report, load_changes(config.changes), config.replacement)
    with Timer('rewrite'):
        rewritten, plan = apply(image, disassemble(image), changeset, bundle)
    for diagnostic in plan.diagnostics:
        print(diagnostic.render())

    tmp = config.out + '.tmp'
    with open(tmp, 'wb') as f:
        f.write(rewritten.serialize())
    os.chmod(tmp, 0o755)
    os.replace(tmp, config.out)
    for line in plan.summary.render():
        print(line)
    logger.info(f"wrote {config.out}")
    return 0


def execute(image: BinaryImage, argv: Sequence[bytes], stdin: bytes, gas: int) -> ExecutionTrace:
    machine = prepare_program(image, argv, stdin, gas, record=True)
    try:
        trace = machine.run()
    except ExecutionError as e:
        tail = ' '.join(f"{v:x}" for v in machine.trace.vaddrs[-TRACE_TAIL:])
        logger.error(f"{image.path}: {e}; last instructions: {tail}")
        raise
    if trace.exit_status is None:
        trace.exit_status = machine.get('rax') & 0xff
    return trace


def verify_pair(original: BinaryImage, rewritten: BinaryImage, argv: Sequence[bytes], stdin: bytes,
                gas: int, expected: Optional[bytes] = None) -> Tuple[List[str], bool]:
    baseline = execute(original, argv, stdin, gas)
    result = execute(rewritten, argv, stdin, gas)
    if expected is None:
        expected = baseline.stdout
    matched = result.stdout == expected and result.exit_status == 0
    delta = result.instruction_count - baseline.instruction_count
    ratio = result.instruction_count / baseline.instruction_count if baseline.instruction_count else 0.0
    lines = [
        f"baseline {baseline.instruction_count}",
        f"rewritten {result.instruction_count}",
        f"delta {delta:+d}",
        f"ratio {ratio:.4f}",
        f"stdout {'ok' if matched else 'mismatch'}",
    ]
    return lines, matched


def cmd_verify(config: PipelineConfig, expect: Optional[str] = None) -> int:
    config.require('binary', 'out', 'scripts')
    original = load(config.binary)
    rewritten = load(config.out)
    expected = None
    if expect:
        try:
            with open(expect, 'rb') as f:
                expected = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read expectation {expect}: {e}")

    ok = True
    with Timer('verify'):
        for path in config.scripts:
            argv, stdin = load_script(path)
            lines, matched = verify_pair(original, rewritten, argv, stdin, config.gas, expected)
            for line in lines:
                print(line)
            ok = ok and matched
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='hashswap',
        description='Replace weak hash routines in stripped x86-64 ELF executables',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__,
    )
    parser.add_argument('--version', action='version', version=f"hashswap {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--binary', help='Input ELF executable')
    common.add_argument('--reports', help='Directory holding phase reports (default: reports)')
    common.add_argument('--gas', type=int, help='Instruction budget per emulated run')
    common.add_argument('--config', help='JSON file with default option values')
    common.add_argument('--verbose', '-v', action='store_true', help='Enable debug logging')

    commands = parser.add_subparsers(dest='command', required=True)
    ident = commands.add_parser('identify', parents=[common], help='Locate weak hash routines')
    ident.add_argument('--signatures', help='Extra constant signatures file')

    scope = commands.add_parser('scope', parents=[common], help='Collect digest-derived buffers')
    scope.add_argument('--script', dest='scripts', action='append', help='Test-input script (repeatable)')

    rewrite = commands.add_parser('rewrite', parents=[common], help='Write the rewritten executable')
    rewrite.add_argument('--out', help='Output path for the rewritten binary')
    rewrite.add_argument('--bundle', help='Replacement patch bundle')
    rewrite.add_argument('--changes', help='Logic edits file')
    rewrite.add_argument('--replacement', help='Replacement algorithm (default SHA-256)')
    rewrite.add_argument('--target', type=lambda text: int(text, 16), help='Routine entry (hex) to replace')

    verify = commands.add_parser('verify', parents=[common], help='Compare original and rewritten runs')
    verify.add_argument('--out', help='Rewritten binary')
    verify.add_argument('--script', dest='scripts', action='append', help='Test-input script (repeatable)')
    verify.add_argument('--expect', help='File holding the expected stdout')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s'
    )
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        config = build_config(vars(args), args.config)
        config.validate()
        if args.command == 'identify':
            return cmd_identify(config)
        if args.command == 'scope':
            return cmd_scope(config)
        if args.command == 'rewrite':
            return cmd_rewrite(config)
        return cmd_verify(config, args.expect)
    except HashswapError as e:
        logger.error(str(e))
        return e.exit_code
    except Exception as e:
        logger.error(f"internal error: {e}")
        logger.debug("traceback", exc_info=True)
        return 2


if __name__ == '__main__':
    sys.exit(main())
