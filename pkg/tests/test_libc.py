import pytest

from conftest import make_image
from hashswap.emulator import HEAP_BASE, Machine
from hashswap.errors import ExecutionError
from hashswap.libc import Derive, LibcModel, MemSource, RegSource, builtin_libc_models, format_string, model_table

DATA = 0x402000


@pytest.fixture
def machine():
    return Machine(make_image(data=bytes(256)), gas=1000)


def test_format_string(machine):
    machine.memory.write(DATA + 0x40, b'hi\0')
    machine.set('rsi', 0xab)
    machine.set('rdx', DATA + 0x40)
    machine.set('rcx', -3)
    machine.set('r8', 42)
    machine.set('r9', ord('Z'))
    text, chunks = format_string(machine, b'%02x|%s|%-4d|%5u|%c%%', 1)
    assert text == b'ab|hi|-3  |   42|Z%'
    assert chunks == [
        (0, 2, (RegSource('rsi'),)),
        (3, 2, (MemSource(DATA + 0x40, 3),)),
        (6, 4, (RegSource('rcx'),)),
        (11, 5, (RegSource('r8'),)),
        (17, 1, (RegSource('r9'),)),
    ]


def test_format_string_length_modifiers(machine):
    machine.set('rsi', 0x1ff)
    machine.set('rdx', 0xffffffffffffffff)
    text, _chunks = format_string(machine, b'%hhx %ld', 1)
    assert text == b'ff -1'


def test_sprintf_derives_converted_bytes(machine):
    machine.memory.write(DATA, b'%02x\0')
    machine.set('rdi', DATA + 0x80)
    machine.set('rsi', DATA)
    machine.set('rdx', 7)
    effect = model_table()['sprintf'].behavior(machine)
    assert machine.memory.read(DATA + 0x80, 3) == b'07\0'
    assert effect.ret == 2
    assert effect.writes == [Derive(DATA + 0x80, 2, (RegSource('rdx'),)), Derive(DATA + 0x82, 1)]


def test_printf_and_puts_write_stdout(machine):
    machine.memory.write(DATA, b'%d!\0')
    machine.set('rdi', DATA)
    machine.set('rsi', 5)
    model_table()['printf'].behavior(machine)
    machine.set('rdi', DATA + 3)
    model_table()['puts'].behavior(machine)
    assert bytes(machine.stdout) == b'5!\n'


def test_heap_models(machine):
    models = model_table()
    machine.set('rdi', 24)
    base = models['malloc'].behavior(machine).ret
    assert base == HEAP_BASE
    machine.set('rdi', 2)
    machine.set('rsi', 8)
    effect = models['calloc'].behavior(machine)
    assert effect.writes == [Derive(effect.ret, 16)]
    assert effect.ret > base + 24
    assert [a.size for a in machine.live_allocations()] == [24, 16]
    machine.set('rdi', base)
    models['free'].behavior(machine)
    assert [a.size for a in machine.live_allocations()] == [16]
    with pytest.raises(ExecutionError):
        models['free'].behavior(machine)


def test_read_and_write_descriptors(machine):
    models = model_table()
    machine.stdin = b'abcdef'
    machine.set('rdi', 0)
    machine.set('rsi', DATA)
    machine.set('rdx', 4)
    assert models['read'].behavior(machine).ret == 4
    assert machine.memory.read(DATA, 4) == b'abcd'

    machine.set('rdi', 1)
    models['write'].behavior(machine)
    assert bytes(machine.stdout) == b'abcd'

    machine.set('rdi', 3)
    with pytest.raises(ExecutionError):
        models['write'].behavior(machine)
    with pytest.raises(ExecutionError):
        models['read'].behavior(machine)


def test_exit_halts(machine):
    machine.set('rdi', 0x102)
    model_table()['exit'].behavior(machine)
    assert machine.halted
    assert machine.exit_status == 2


def test_model_table():
    table = model_table()
    assert table['exit'].noreturn
    assert not table['strlen'].noreturn
    assert len(table) == len(builtin_libc_models())
    custom = model_table([LibcModel('strlen', lambda m: None)])
    assert list(custom) == ['strlen']
