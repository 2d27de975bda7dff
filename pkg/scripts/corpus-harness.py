#!/usr/bin/env python3
"""
Corpus Harness
==============

Runs identify -> scope -> rewrite -> verify over every manifest fixture that
carries a weak routine and writes a JSON results file for
generate-report.py. Each fixture runs in its own worker process.

Per fixture the results record:
- whether identification found exactly the recorded routine and layout
- the scoped buffers, the rewrite summary counts and diagnostics
- original, rewritten and baseline sizes and instruction counts
- wall-clock seconds spent in each phase

Usage:
    python scripts/corpus-harness.py --output results.json
    python scripts/corpus-harness.py --jobs 8 --only md5 --output results.json
"""

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from datetime import datetime
from typing import Any, Dict, List, Optional

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from hashswap import __version__  # noqa: E402
from hashswap.bundle import DEFAULT_BUNDLE, load_bundle  # noqa: E402
from hashswap.cli import execute  # noqa: E402
from hashswap.config import DEFAULT_GAS  # noqa: E402
from hashswap.disasm import disassemble  # noqa: E402
from hashswap.elf import load  # noqa: E402
from hashswap.emulator import load_script  # noqa: E402
from hashswap.identify import identify  # noqa: E402
from hashswap.rewrite import apply, build_changeset, parse_changes  # noqa: E402
from hashswap.signatures import SignatureDB  # noqa: E402
from hashswap.taint import taint_run  # noqa: E402

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


class Stopwatch:
    def __init__(self):
        self.phases: Dict[str, float] = {}

    def time(self, phase: str, func, *args):
        start = time.perf_counter()
        try:
            return func(*args)
        finally:
            self.phases[phase] = round(time.perf_counter() - start, 3)


def run_fixture(corpus: str, fixture: Dict[str, Any], script: str, gas: int, bundle_path: str) -> Dict[str, Any]:
    """Full pipeline on one fixture; never raises."""
    result: Dict[str, Any] = {
        'name': fixture['name'],
        'kind': fixture['kind'],
        'opt': fixture.get('opt'),
        'layout': fixture.get('layout'),
        'variant': fixture.get('variant'),
        'algorithm': fixture['weak_routines'][0]['algorithm'],
        'ok': False,
    }
    watch = Stopwatch()
    result['timings'] = watch.phases
    try:
        expected = fixture['weak_routines'][0]
        image = load(os.path.join(corpus, fixture['binary']))
        program = disassemble(image)
        argv, stdin = load_script(script)

        identification = watch.time('identify', identify, image, SignatureDB(), gas, program)
        found = {(p.entry, p.algorithm, p.layout.order) for p in identification.primitives}
        wanted = (int(expected['entry'], 16), expected['algorithm'], expected['layout'])
        result['identified'] = wanted in found
        result['false_positives'] = len(found - {wanted})
        target = next((p for p in identification.primitives if p.entry == wanted[0]), None)
        if target is None:
            result['error'] = f"identify missed {expected['symbol']} at {expected['entry']}"
            return result

        report = watch.time('scope', taint_run, image, target, argv, stdin, gas, program)
        result['buffers'] = [{'kind': b.kind, 'location': hex(b.location), 'offset': b.offset,
                              'old_size': b.old_size} for b in report.buffers]

        changeset = build_changeset(report, parse_changes('\n'.join(fixture['changes']), fixture['name']), 'SHA-256')
        rewritten, plan = watch.time('rewrite', apply, image, program, changeset, load_bundle(bundle_path))
        summary = plan.summary
        result['counts'] = {
            'routine': summary.routine,
            'buffer': summary.buffer,
            'logic': summary.logic,
            'automated_share': round(summary.automated_share, 4),
            'routines_relocated': summary.routines_relocated,
        }
        result['diagnostics'] = [d.render() for d in plan.diagnostics]
        result['sizes'] = {
            'original': len(image.raw),
            'rewritten': len(rewritten.raw),
            'added': summary.bytes_added,
            'injected_code': summary.injected_code,
        }

        def verify():
            baseline_path = os.path.join(corpus, 'bin', fixture['baseline'])
            return execute(rewritten, argv, stdin, gas), execute(load(baseline_path), argv, stdin, gas)

        trace, baseline = watch.time('verify', verify)
        result['instructions'] = {
            'rewritten': trace.instruction_count,
            'baseline': baseline.instruction_count,
            'overhead': trace.instruction_count - baseline.instruction_count,
            'ratio': round(trace.instruction_count / baseline.instruction_count, 4),
        }
        result['stdout'] = trace.stdout.decode(errors='replace')
        result['ok'] = trace.stdout.decode(errors='replace') == fixture['rewritten_stdout'] and trace.exit_status == 0
        if not result['ok']:
            result['error'] = f"rewritten stdout {result['stdout']!r}, exit {trace.exit_status}"
    except Exception as e:
        result['error'] = f"{type(e).__name__}: {e}"
    return result


class CorpusHarness:
    """Fans the pipeline out over the manifest fixtures."""

    def __init__(self, manifest_file: str, jobs: int, gas: int, bundle: str):
        with open(manifest_file) as f:
            self.manifest = json.load(f)
        self.corpus = os.path.dirname(os.path.abspath(manifest_file))
        self.script = os.path.join(self.corpus, self.manifest['script'])
        self.jobs = jobs
        self.gas = gas
        self.bundle = bundle

    def fixtures(self, only: Optional[str] = None) -> List[Dict[str, Any]]:
        selected = [f for f in self.manifest['fixtures'] if f.get('weak_routines')]
        if only:
            selected = [f for f in selected if only in f['name']]
        return selected

    def run(self, only: Optional[str] = None) -> Dict[str, Any]:
        fixtures = self.fixtures(only)
        logger.info(f"Running {len(fixtures)} fixtures on {self.jobs} workers")
        results = []
        with ProcessPoolExecutor(max_workers=self.jobs) as pool:
            futures = {pool.submit(run_fixture, self.corpus, fixture, self.script, self.gas, self.bundle):
                       fixture['name'] for fixture in fixtures}
            for future in as_completed(futures):
                result = future.result()
                if result['ok']:
                    logger.info(f"{result['name']}: ok")
                else:
                    logger.warning(f"{result['name']}: {result.get('error', 'failed')}")
                results.append(result)
        results.sort(key=lambda r: r['name'])
        return {
            'harness_version': __version__,
            'generated': datetime.now().isoformat(timespec='seconds'),
            'input': self.manifest['input'],
            'total_fixtures': len(results),
            'passed': sum(1 for r in results if r['ok']),
            'results': results,
        }


def main():
    parser = argparse.ArgumentParser(
        description='Run the full pipeline over the fixture corpus',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__
    )
    parser.add_argument('--manifest', default='corpus/manifest.json', help='Corpus manifest')
    parser.add_argument('--output', default='corpus-results.json', help='JSON results file')
    parser.add_argument('--jobs', type=int, default=os.cpu_count() or 1, help='Worker processes')
    parser.add_argument('--gas', type=int, default=DEFAULT_GAS, help='Instruction budget per run')
    parser.add_argument('--bundle', default=os.environ.get('HASHSWAP_BUNDLE', DEFAULT_BUNDLE),
                        help='Replacement patch bundle')
    parser.add_argument('--only', help='Run fixtures whose name contains this text')
    args = parser.parse_args()

    try:
        harness = CorpusHarness(args.manifest, max(1, args.jobs), args.gas, args.bundle)
        results = harness.run(args.only)
        with open(args.output, 'w') as f:
            json.dump(results, f, indent=2)
    except Exception as e:
        logger.error(f"Corpus run failed: {e}")
        sys.exit(1)

    logger.info(f"{results['passed']}/{results['total_fixtures']} fixtures passed; results in {args.output}")
    if results['passed'] != results['total_fixtures']:
        sys.exit(1)


if __name__ == '__main__':
    main()
