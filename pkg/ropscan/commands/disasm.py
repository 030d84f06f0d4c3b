from pathlib import Path

import typer

from ropscan.commands.common import tracked_run
from ropscan.services.disasm import MAX_GADGET_INSNS, MAX_INSN_LEN, InsnClass, decode, extract_gadget
from ropscan.services.memory_image import load_image


def _parse_address(value: str) -> int:
    try:
        return int(value, 0)
    except ValueError:
        raise typer.BadParameter(f"{value!r} is not an address", param_hint="--addr")


def disasm(
    image_path: Path = typer.Option(..., "--image", exists=True, dir_okay=False, help="RMIM file"),
    addr: str = typer.Option(..., "--addr", help="Start address, e.g. 0x0804c69a"),
    count: int = typer.Option(16, "--count", min=1, help="Instructions for a linear sweep"),
    gadget: bool = typer.Option(False, "--gadget", help="Only print the gadget-like sequence at addr"),
):
    """Print decoded instructions: address, hex bytes, text."""
    start = _parse_address(addr)
    with tracked_run("disasm", paths={"image": image_path}, addr=addr, count=count, gadget=gadget):
        image = load_image(image_path)
        if gadget:
            seq = extract_gadget(image, start, MAX_GADGET_INSNS)
            if seq is None:
                typer.echo(f"{start:#010x}\tno gadget-like sequence")
                return
            instructions = seq.instructions
        else:
            instructions, cur = [], start
            while len(instructions) < count and image.contains(cur):
                insn = decode(image.read_bytes(cur, MAX_INSN_LEN))
                instructions.append(insn)
                if insn.category is InsnClass.INVALID:
                    break
                cur += insn.length
        cur = start
        for insn in instructions:
            raw = insn.raw or image.read_bytes(cur, 1)
            typer.echo(f"{cur:#010x}\t{raw.hex()}\t{insn}")
            cur += insn.length
