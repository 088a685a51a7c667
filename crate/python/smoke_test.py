"""Smoke test for the soundfield_py extension.

Build the module first, for example with `maturin develop -m crates/python/Cargo.toml`,
then run `python python/smoke_test.py [checkpoint]`.
"""

import sys

import soundfield_py as sf


def main():
    freqs = sf.frequency_grid()
    assert len(freqs) == 40
    print(f"{len(freqs)} bins from {freqs[0]:.1f} to {freqs[-1]:.2f} Hz")

    room = sf.Room(5.0, 4.0, 2.5, (1.2, 0.9))
    field = room.magnitude_field()
    print(f"{room!r}: field {field.n}x{field.n} x {field.n_freq}")

    for n_mic in (5, 15, 35, 55):
        arr = sf.Arrangement.sample(n_mic, seed=7)
        est = sf.baseline(field, arr, "idw")
        nmse_db, mssim = sf.metrics(field, est)
        band = sum(nmse_db) / len(nmse_db)
        print(f"idw n_mic={n_mic:2d}: mean NMSE {band:6.2f} dB, mean MSSIM {sum(mssim) / len(mssim):.3f}")

    if len(sys.argv) > 1:
        model = sf.Model.load(sys.argv[1])
        arr = sf.Arrangement.sample(15, seed=7)
        est = model.reconstruct(field, arr)
        nmse_db, _ = sf.metrics(field, est)
        print(f"network ({model.parameter_count} parameters): mean NMSE {sum(nmse_db) / len(nmse_db):.2f} dB")

    print("ok")


if __name__ == "__main__":
    main()
