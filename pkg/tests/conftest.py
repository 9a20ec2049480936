from __future__ import annotations

import pytest

from ascvote.dsp import synthesize_tone, write_wav

TOY_RATE = 4000.0
TOY_CLASSES = {"low_hum": 150.0, "high_whine": 600.0}


@pytest.fixture(scope="session")
def toy_audio_manifest(tmp_path_factory):
    """A tiny two-class manifest of distinguishable tones, two folds."""
    root = tmp_path_factory.mktemp("toy_audio")
    lines = ["segment_id,path,class_name,fold"]
    index = 0
    for class_name, frequency in TOY_CLASSES.items():
        for i in range(6):
            seg_id = f"{class_name}_{i}"
            wav = root / f"{seg_id}.wav"
            segment = synthesize_tone(
                frequency * (1.0 + 0.01 * i),
                0.5,
                TOY_RATE,
                amplitude=0.6,
                noise=0.05,
                seed=index,
                segment_id=seg_id,
            )
            write_wav(wav, segment)
            lines.append(f"{seg_id},{wav.name},{class_name},{i % 2}")
            index += 1
    manifest = root / "manifest.csv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
