#!/usr/bin/env python3
"""
Fixture Corpus Builder
======================

Rebuilds every fixture binary in corpus/bin from corpus/src with gcc/as/ld,
records ground truth (weak routine entries, call sites, logic-edit bytes)
from the symbol tables before stripping, and writes corpus/manifest.json.
Also regenerates the shipped SHA-256 bundle from corpus/src/bundle.s.

Only maintainers need this; the committed binaries keep the test suite
compiler-free.

Usage:
    python scripts/build-corpus.py --corpus corpus --bundle hashswap/data/sha256.bundle
"""

import argparse
import hashlib
import json
import logging
import os
import shutil
import subprocess
import sys
import tempfile
from typing import Any, Dict, List, Optional

from elftools.elf.elffile import ELFFile
from elftools.elf.sections import SymbolTableSection

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from hashswap.disasm import disassemble  # noqa: E402
from hashswap.elf import load  # noqa: E402
from hashswap.x86 import decode  # noqa: E402

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

INPUT = 'Hello, world!'
CFLAGS = ['-fno-pie', '-fcf-protection=none', '-fno-stack-protector', '-mgeneral-regs-only',
          '-fno-asynchronous-unwind-tables', '-U_FORTIFY_SOURCE', '-fno-jump-tables']
LDFLAGS = ['-no-pie', '-nostartfiles', '-Wl,--build-id=none']
PRINTER_LDFLAGS = ['-Wl,-z,noseparate-code', '-Wl,--section-start=.plt=0x4004b0',
                   '-Wl,--section-start=.text=0x400510']
OPT_LEVELS = ['O0', 'O1', 'O2', 'O3', 'Os']
WRAPPER_LAYOUTS = ['ILO', 'OIL', 'OI']
VARIANTS = ['heap', 'calloc', 'static', 'riprel', 'table']
# hand-edited baselines link lib/sha256.c at this level
BASELINE_OPT = 'O2'
# (source stem, wrapper symbol, manifest algorithm name, digest size)
LIBRARIES = [
    ('md2', 'MD2', 'MD2', 16),
    ('md4', 'MD4', 'MD4', 16),
    ('md5', 'MD5', 'MD5', 16),
    ('sha1', 'SHA1', 'SHA1', 20),
    ('rmd160', 'RIPEMD160', 'RIPEMD-160', 20),
]
BUNDLE_LAYOUTS = ['ILO', 'IOL', 'LIO', 'LOI', 'OIL', 'OLI', 'IO', 'OI']
BUNDLE_SCRIPT = """SECTIONS {
  .text 0 : { *(.text) }
  . = ALIGN(16);
  .rodata : { *(.rodata) }
  /DISCARD/ : { *(.note.GNU-stack) }
}
"""


class CorpusBuilder:
    """Compiles fixtures and derives their manifest entries."""

    def __init__(self, corpus: str, work: str):
        self.corpus = corpus
        self.src = os.path.join(corpus, 'src')
        self.work = work
        self.fixtures: List[Dict[str, Any]] = []
        self.expected_rewrite = hashlib.sha256(INPUT.encode()).hexdigest() + '\n'

    def _run(self, cmd: List[str]) -> str:
        result = subprocess.run(cmd, capture_output=True, text=True)
        if result.returncode != 0:
            raise RuntimeError(f"{' '.join(cmd)} failed: {result.stderr.strip()}")
        return result.stdout

    def _out(self, name: str) -> str:
        return os.path.join(self.work, name)

    def _symbols(self, path: str) -> Dict[str, int]:
        with open(path, 'rb') as f:
            elf = ELFFile(f)
            table = elf.get_section_by_name('.symtab')
            if not isinstance(table, SymbolTableSection):
                return {}
            return {sym.name: sym['st_value'] for sym in table.iter_symbols() if sym.name}

    # -- compilation ---------------------------------------------------------

    def _driver(self, out: str, digest: int, wrapper: str, layout: str, style: str, variant: str):
        defs = [f"-DDIGEST={digest}", f"-DWRAPPER={wrapper}", f"-DLAYOUT_{layout}"]
        if style == 'rbp':
            defs.append('-DSTYLE_RBP')
        if variant != 'stack':
            defs.append(f"-DVARIANT_{variant.upper()}")
        self._run(['gcc', '-c', *defs, '-o', out, os.path.join(self.src, 'driver.S')])

    def _link(self, name: str, objects: List[str], extra: Optional[List[str]] = None) -> str:
        out = self._out(name)
        self._run(['gcc', *LDFLAGS, *(extra or []), '-o', out, *objects])
        return out

    def _library(self, stem: str, opt: str, layout: str) -> str:
        out = self._out(f"{stem}-{layout}-{opt}.lib.o")
        self._run(['gcc', '-c', *CFLAGS, f"-{opt}", f"-DLAYOUT_{layout}", '-I', os.path.join(self.src, 'lib'),
                   '-o', out, os.path.join(self.src, 'lib', f"{stem}.c")])
        return out

    def build(self):
        start = self._out('start.o')
        bundle = self._out('bundle.o')
        self._run(['gcc', '-c', '-o', start, os.path.join(self.src, 'start.s')])
        self._run(['as', '-I', self.src, '-o', bundle, os.path.join(self.src, 'bundle.s')])

        for stem, wrapper, algorithm, digest in LIBRARIES:
            for layout in WRAPPER_LAYOUTS:
                for opt in OPT_LEVELS:
                    style = 'rbp' if opt == 'O0' else 'rsp'
                    name = f"{stem}-{layout.lower()}-{opt}"
                    driver = self._out(f"{name}.drv.o")
                    self._driver(driver, digest, wrapper, layout, style, 'stack')
                    self._link(name, [start, driver, self._library(stem, opt, layout)])
                    self._record(name, 'library', [f"lib/{stem}.c", 'driver.S'], opt=opt, layout=layout,
                                 variant='stack', style=style, wrapper=wrapper, algorithm=algorithm,
                                 digest=digest, baseline=f"baseline-{layout.lower()}-{style}")

        for variant in VARIANTS:
            name = f"md5-ilo-O2-{variant}"
            driver = self._out(f"{name}.drv.o")
            self._driver(driver, 16, 'MD5', 'ILO', 'rsp', variant)
            self._link(name, [start, driver, self._library('md5', 'O2', 'ILO')])
            self._record(name, 'variant', ['lib/md5.c', 'driver.S'], opt='O2', layout='ILO', variant=variant,
                         style='rsp', wrapper='MD5', algorithm='MD5', digest=16,
                         baseline=f"baseline-ilo-rsp-{variant}")

        baselines = [(layout, style, 'stack') for layout in WRAPPER_LAYOUTS for style in ('rbp', 'rsp')]
        baselines += [('ILO', 'rsp', variant) for variant in VARIANTS]
        for layout, style, variant in baselines:
            name = f"baseline-{layout.lower()}-{style}" + ('' if variant == 'stack' else f"-{variant}")
            driver = self._out(f"{name}.drv.o")
            self._driver(driver, 32, 'SHA256', layout, style, variant)
            self._link(name, [start, driver, self._library('sha256', BASELINE_OPT, layout)])
            self._record(name, 'baseline', ['driver.S', 'lib/sha256.c'], layout=layout, variant=variant, style=style)

        printer = self._out('printer.o')
        self._run(['as', '-I', self.src, '-o', printer, os.path.join(self.src, 'printer.s')])
        self._link('md5-printer', [printer], PRINTER_LDFLAGS)
        self._record('md5-printer', 'printer', ['printer.s', 'md5.s'], layout='ILO', variant='stack',
                     style='rbp', wrapper='MD5', algorithm='MD5', digest=16, baseline='md5-printer-baseline',
                     bounds=['logic_hex_bound', 'logic_print_bound'])
        printer_baseline = self._out('printer-b.o')
        self._run(['as', '-I', self.src, '--defsym', 'BASELINE=1', '-o', printer_baseline,
                   os.path.join(self.src, 'printer.s')])
        self._link('md5-printer-baseline', [printer_baseline, self._library('sha256', BASELINE_OPT, 'ILO')],
                   PRINTER_LDFLAGS)
        self._record('md5-printer-baseline', 'baseline', ['printer.s', 'lib/sha256.c'], layout='ILO',
                     variant='stack', style='rbp')

        aes = self._out('aes.o')
        self._run(['gcc', '-c', *CFLAGS, '-O2', '-o', aes, os.path.join(self.src, 'aes.c')])
        self._link('aes-sbox', [start, aes])
        self._record('aes-sbox', 'detect', ['aes.c'], opt='O2')
        for kind in ('empty', 'orphan'):
            obj = self._out(f"{kind}.o")
            self._run(['as', '-o', obj, os.path.join(self.src, f"{kind}.s")])
            self._link(kind, [start, obj])
            self._record(kind, kind, [f"{kind}.s"])

    # -- ground truth ----------------------------------------------------------

    def _logic_edit(self, path: str, vaddr: int, style: str) -> str:
        image = load(path)
        insn = decode(image.read(vaddr, 15), vaddr)
        bound = 0x1f if style == 'rbp' else 0x20
        return f"logic {vaddr:x} {insn.raw.hex()} -> {insn.raw[:-1].hex()}{bound:02x}"

    def _record(self, name: str, kind: str, source: List[str], opt: Optional[str] = None,
                layout: Optional[str] = None, variant: Optional[str] = None, style: Optional[str] = None,
                wrapper: Optional[str] = None, algorithm: Optional[str] = None, digest: int = 0,
                baseline: Optional[str] = None, bounds: Optional[List[str]] = None):
        path = self._out(name)
        symbols = self._symbols(path)
        native = subprocess.run([path, INPUT], capture_output=True, text=True)
        fixture: Dict[str, Any] = {'name': name, 'binary': f"bin/{name}", 'kind': kind, 'source': source}
        for key, value in (('opt', opt), ('layout', layout), ('variant', variant), ('style', style)):
            if value is not None:
                fixture[key] = value
        fixture['main'] = hex(symbols['main'])
        fixture['stdout'] = native.stdout

        if wrapper:
            entry = symbols[wrapper]
            program = disassemble(load(path))
            fixture['weak_routines'] = [{
                'symbol': wrapper,
                'entry': hex(entry),
                'algorithm': algorithm,
                'layout': layout,
                'digest_size': digest,
                'call_sites': [hex(site) for site in program.graph.call_sites(entry)],
            }]
            fixture['changes'] = [self._logic_edit(path, symbols[bound], style)
                                  for bound in bounds or ['logic_bound']]
            fixture['rewritten_stdout'] = self.expected_rewrite
            fixture['baseline'] = baseline
            if 'digest' in symbols:
                fixture['static_digest'] = hex(symbols['digest'])
        if kind == 'baseline':
            fixture['algorithm'] = 'SHA-256'
        if kind == 'detect':
            fixture['detected'] = [{'algorithm': 'AES', 'vaddr': hex(symbols['aes_sbox'])}]
        if kind == 'orphan':
            fixture['orphans'] = [hex(symbols['stray_iv'])]

        os.makedirs(os.path.join(self.corpus, 'bin'), exist_ok=True)
        self._run(['strip', '-o', os.path.join(self.corpus, 'bin', name), path])
        self.fixtures.append(fixture)
        logger.info(f"built {name}")

    def write_manifest(self):
        manifest = {'version': '1.0', 'input': INPUT, 'script': 'hello.script', 'fixtures': self.fixtures}
        with open(os.path.join(self.corpus, 'manifest.json'), 'w') as f:
            json.dump(manifest, f, indent=2)
            f.write('\n')
        changes = os.path.join(self.corpus, 'changes')
        os.makedirs(changes, exist_ok=True)
        for fixture in self.fixtures:
            if fixture.get('changes'):
                with open(os.path.join(changes, f"{fixture['name']}.changes"), 'w') as f:
                    f.write('\n'.join(fixture['changes']) + '\n')
        logger.info(f"wrote manifest with {len(self.fixtures)} fixtures")

    # -- bundle ----------------------------------------------------------------

    def build_bundle(self, output: str):
        script = self._out('bundle.ld')
        with open(script, 'w') as f:
            f.write(BUNDLE_SCRIPT)
        elf = self._out('bundle.elf')
        self._run(['ld', '-T', script, '-o', elf, self._out('bundle.o')])
        code, data = self._out('bundle.code'), self._out('bundle.data')
        self._run(['objcopy', '-O', 'binary', '-j', '.text', elf, code])
        self._run(['objcopy', '-O', 'binary', '-j', '.rodata', elf, data])
        symbols = self._symbols(elf)

        lines = [
            '# SHA-256 replacement: position independent, one entry per argument order',
            'algorithm SHA-256',
            'digest_size 32',
            'align 16',
        ]
        for layout in BUNDLE_LAYOUTS:
            lines.append(f"entry {layout} {symbols[f'sha256_{layout.lower()}']:#x}")
        with open(code, 'rb') as f:
            lines.append(f"code {f.read().hex()}")
        with open(data, 'rb') as f:
            lines.append(f"data {f.read().hex()}")
        with open(output, 'w') as f:
            f.write('\n'.join(lines) + '\n')
        logger.info(f"wrote bundle {output}")


def main():
    parser = argparse.ArgumentParser(
        description='Rebuild the fixture corpus and the shipped bundle',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__
    )
    parser.add_argument('--corpus', default='corpus', help='Corpus directory')
    parser.add_argument('--bundle', default='hashswap/data/sha256.bundle', help='Bundle output path')
    parser.add_argument('--keep', action='store_true', help='Keep the intermediate build directory')
    args = parser.parse_args()

    for tool in ('gcc', 'as', 'ld', 'objcopy', 'strip'):
        if shutil.which(tool) is None:
            logger.error(f"{tool} not found on PATH")
            sys.exit(1)

    work = tempfile.mkdtemp(prefix='hashswap-corpus-')
    builder = CorpusBuilder(args.corpus, work)
    try:
        builder.build()
        builder.write_manifest()
        builder.build_bundle(args.bundle)
    except Exception as e:
        logger.error(f"Corpus build failed: {e}")
        sys.exit(1)
    finally:
        if args.keep:
            logger.info(f"intermediate files kept in {work}")
        else:
            shutil.rmtree(work, ignore_errors=True)


if __name__ == '__main__':
    main()
