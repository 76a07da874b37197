"""Regenerate the checked-in graph text fixtures under tests/golden/.

Run after an intentional change to an encoder or decoder builder, then review
the diff.
"""
from pathlib import Path

from segbench.decoders import DECODERS, build_model
from segbench.encoders import ENCODERS, build_encoder
from segbench.graph import dumps

OUT = Path(__file__).resolve().parent.parent / "tests" / "golden"


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for enc in ENCODERS:
        (OUT / f"encoder-{enc}.graph").write_text(dumps(build_encoder(enc).graph))
        for dec in DECODERS:
            model = build_model(enc, dec)
            (OUT / f"{model.model_id}.graph").write_text(dumps(model.graph))
    print(f"wrote {len(list(OUT.glob('*.graph')))} fixtures to {OUT}")


if __name__ == "__main__":
    main()
