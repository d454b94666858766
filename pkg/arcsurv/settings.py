from pathlib import Path

ROOT_DIR = Path(__file__).parent.resolve()
PRESET_FILE = ROOT_DIR / "presets.json"
