import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

from .errors import InvalidArgumentError, SchemaError
from .schemas import StudyConfig

logger = logging.getLogger(__name__)

DEFAULT_PRESETS_DIR = Path(__file__).resolve().parent.parent / "presets"


class PresetManager:
    """Manages named study presets and their resolution into study configs"""

    def __init__(self, presets_dir: Optional[str] = None):
        self.presets_dir = Path(presets_dir) if presets_dir else DEFAULT_PRESETS_DIR
        self.registry_path = self.presets_dir / "registry.json"
        self._registry_cache = None
        self._preset_cache = {}

    def _load_registry(self) -> Dict[str, str]:
        """Load the registry mapping preset names to preset files"""
        if self._registry_cache is None:
            try:
                with open(self.registry_path, "r", encoding="utf-8") as f:
                    self._registry_cache = json.load(f)
            except FileNotFoundError:
                raise SchemaError(f"Preset registry not found at {self.registry_path}")
            except json.JSONDecodeError as e:
                raise SchemaError(f"Invalid JSON in preset registry: {e}")

        return self._registry_cache

    def _load_preset(self, preset_filename: str) -> Dict[str, Any]:
        """Load a specific preset file"""
        if preset_filename not in self._preset_cache:
            preset_path = self.presets_dir / preset_filename
            try:
                with open(preset_path, "r", encoding="utf-8") as f:
                    self._preset_cache[preset_filename] = json.load(f)
            except FileNotFoundError:
                raise SchemaError(f"Preset file not found: {preset_path}")
            except json.JSONDecodeError as e:
                raise SchemaError(f"Invalid JSON in preset file {preset_filename}: {e}")

        return self._preset_cache[preset_filename]

    def get_raw_preset(self, name: str) -> Dict[str, Any]:
        registry = self._load_registry()
        if name not in registry:
            raise InvalidArgumentError(f"No preset registered under {name!r}; available: {sorted(registry)}")
        return self._load_preset(registry[name])

    def get_preset(self, name: str, overrides: Optional[Dict[str, Any]] = None) -> StudyConfig:
        """Resolve a preset into a StudyConfig; ``overrides`` replace top-level study fields"""
        preset = self.get_raw_preset(name)
        study = dict(preset.get("study", {}))
        study.update(overrides or {})
        try:
            cfg = StudyConfig.model_validate(study)
        except ValidationError as e:
            raise SchemaError(f"Preset {name!r} does not describe a valid study",
                              [f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()])
        logger.debug(f"🔄 Preset {name} v{preset.get('version', 'N/A')} resolved")
        return cfg

    def get_eta_grid(self, name: str) -> List[float]:
        """η values of a power-curve preset (empty for single-study presets)"""
        return [float(v) for v in self.get_raw_preset(name).get("eta_grid", [])]

    def list_available_presets(self) -> Dict[str, Dict[str, Any]]:
        """List all registered presets with their metadata"""
        registry = self._load_registry()
        presets_info = {}

        for name, preset_filename in registry.items():
            try:
                preset = self._load_preset(preset_filename)
                study = preset.get("study", {})
                presets_info[name] = {
                    "filename": preset_filename,
                    "version": preset.get("version"),
                    "description": preset.get("description"),
                    "design": study.get("design"),
                    "link": study.get("link", {}).get("name"),
                    "power_curve": bool(preset.get("eta_grid")),
                }
            except SchemaError as e:
                presets_info[name] = {
                    "filename": preset_filename,
                    "error": str(e),
                }

        return presets_info

    def validate_preset(self, preset_filename: str) -> List[str]:
        """Validate a preset file and return any errors"""
        errors = []

        try:
            preset = self._load_preset(preset_filename)

            for field in ("version", "description", "study"):
                if field not in preset:
                    errors.append(f"Missing required field: {field}")

            if "study" in preset:
                if not isinstance(preset["study"], dict):
                    errors.append("'study' must be an object")
                else:
                    try:
                        StudyConfig.model_validate(preset["study"])
                    except ValidationError as e:
                        for err in e.errors():
                            errors.append(f"study.{'.'.join(str(p) for p in err['loc'])}: {err['msg']}")

            if "eta_grid" in preset:
                grid = preset["eta_grid"]
                if not isinstance(grid, list) or not grid:
                    errors.append("'eta_grid' must be a nonempty list")
                elif not all(isinstance(v, (int, float)) for v in grid):
                    errors.append("'eta_grid' must contain only numbers")
                elif any(b < a for a, b in zip(grid, grid[1:])):
                    errors.append("'eta_grid' must be nondecreasing")
                elif preset.get("study", {}).get("link", {}).get("name") != "power_family":
                    errors.append("'eta_grid' requires the power_family link")

        except SchemaError as e:
            errors.append(f"Failed to load preset: {e.message}")

        return errors

    def clear_cache(self):
        """Clear the internal cache (useful for development/testing)"""
        self._registry_cache = None
        self._preset_cache = {}


# Global instance for use throughout the package
preset_manager = PresetManager()
