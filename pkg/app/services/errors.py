class GraspError(ValueError):
    """파지 합성 관련 오류의 기본 클래스"""


class MeshError(GraspError):
    """메쉬 파일 읽기/검증 실패"""


class HandModelError(GraspError):
    """핸드 모델(URDF 서브셋) 파싱/검증 실패"""


class ContactFieldError(GraspError):
    """컨택트 필드 인덱스 조회/캐시 오류"""


class ConfigError(GraspError):
    """설정 파일 또는 플래그 검증 실패"""
