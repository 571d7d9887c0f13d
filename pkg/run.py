import multiprocessing

from flask.cli import FlaskGroup

from app import create_app

cli = FlaskGroup(create_app=create_app, add_default_commands=False)

if __name__ == "__main__":
    # 워커 풀은 spawn 컨텍스트 (frozen 실행 파일에서도 동작)
    multiprocessing.freeze_support()
    cli()
