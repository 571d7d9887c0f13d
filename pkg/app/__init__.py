import logging
import os
from typing import Any, Mapping, Optional

from flask import Flask

_THIS_DIR = os.path.abspath(os.path.dirname(__file__))
_ROOT_DIR = os.path.abspath(os.path.join(_THIS_DIR, ".."))
DEFAULT_CONFIG = os.path.join(_ROOT_DIR, "config", "default.ini")


def create_app(config_path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None):
    app = Flask(__name__)

    # 명령별 설정은 이 파일 + overrides 위에 플래그를 얹어 만든다
    path = config_path or os.environ.get("GRASP_CONFIG")
    if path is None and os.path.isfile(DEFAULT_CONFIG):
        path = DEFAULT_CONFIG
    app.config["CONFIG_PATH"] = path
    app.config["CONFIG_OVERRIDES"] = dict(overrides or {})

    from .config import parse_config
    app.config.update(parse_config(path, overrides=overrides).to_flask())

    logging.basicConfig(format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    logging.getLogger("app").setLevel(app.config["LOG_LEVEL"])

    from .commands import bp as main_bp
    app.register_blueprint(main_bp)

    return app
