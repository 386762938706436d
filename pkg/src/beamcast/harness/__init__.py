from .config import ScenarioConfig, parse_config  # noqa: F401
