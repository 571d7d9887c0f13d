# app/services/report_generator.py
import html
import os
from typing import Any, Dict, List

import numpy as np
import trimesh

from .kinematics import HandModel, forward_kinematics
from .mesh_geometry import TriMesh


class HTMLReportGenerator:
    """HTML 형식의 합성 실행 리포트 생성기"""

    def generate(self, results: Dict) -> str:
        """합성 결과를 HTML로 변환"""
        metadata = results["metadata"]
        summary = results["summary"]
        grasps = results["dataset"].grasps if "dataset" in results else []

        html_content = f"""
<!DOCTYPE html>
<html lang="ko">
<head>
    <meta charset="UTF-8">
    <meta name="viewport" content="width=device-width, initial-scale=1.0">
    <title>그래스프 합성 결과</title>
    <style>
        {self._get_css()}
    </style>
</head>
<body>
    <div class="container">
        <header>
            <h1>그래스프 합성 결과</h1>
            <div class="metadata">
                {self._meta_item("핸드", metadata["hand_file"])}
                {self._meta_item("오브젝트", metadata["object_file"])}
                {self._meta_item("배치 모드", metadata["placement"])}
                {self._meta_item("시드 / 배치 / 패스", f"{metadata['seed']} / {metadata['batch']} / {metadata['passes']}")}
                {self._meta_item("실행 시간", metadata["synthesized_at"])}
            </div>
        </header>

        <section class="summary">
            <h2>요약</h2>
            <div class="summary-grid">
                <div class="summary-card">
                    <div class="summary-number">{summary["valid_grasps"]}</div>
                    <div class="summary-label">유효 그래스프</div>
                </div>
                <div class="summary-card">
                    <div class="summary-number">{summary["acceptance_rate"]:.1%}</div>
                    <div class="summary-label">채택률</div>
                </div>
                <div class="summary-card">
                    <div class="summary-number">{results["profile"]["sps"]:.2f}</div>
                    <div class="summary-label">유효 샘플/초</div>
                </div>
            </div>

            <div class="breakdown">
                <h3>거절 사유</h3>
                <div class="type-grid">
                    {self._generate_rejection_stats(summary["rejections"])}
                </div>
            </div>
        </section>

        <section class="profile">
            <h2>단계별 시간</h2>
            {self._generate_profile_table(results["profile"])}
        </section>

        <section class="grasps">
            <h2>그래스프 목록</h2>
            {self._generate_grasps_html(grasps)}
        </section>
    </div>
</body>
</html>
"""
        return html_content

    def _get_css(self) -> str:
        """CSS 스타일 정의"""
        return """
        * { margin: 0; padding: 0; box-sizing: border-box; }

        body {
            font-family: -apple-system, BlinkMacSystemFont, 'Segoe UI', Roboto, sans-serif;
            background: #eef1f7;
            padding: 20px;
        }

        .container {
            max-width: 1200px;
            margin: 0 auto;
            background: white;
            border-radius: 20px;
            box-shadow: 0 20px 60px rgba(0,0,0,0.15);
            overflow: hidden;
        }

        header {
            background: linear-gradient(135deg, #2f6f8f 0%, #3b4b8c 100%);
            color: white;
            padding: 30px;
        }

        header h1 { font-size: 2.2rem; margin-bottom: 20px; }

        .metadata {
            display: grid;
            grid-template-columns: repeat(auto-fit, minmax(220px, 1fr));
            gap: 15px;
        }

        .meta-item {
            background: rgba(255,255,255,0.1);
            padding: 10px 15px;
            border-radius: 10px;
        }

        .meta-item .label { font-weight: 600; margin-right: 10px; }
        .meta-item .value { color: #ffd700; }

        section { padding: 30px; }
        section h2 { color: #333; margin-bottom: 20px; font-size: 1.6rem; }
        .summary { background: #f8f9fa; }

        .summary-grid {
            display: grid;
            grid-template-columns: repeat(auto-fit, minmax(200px, 1fr));
            gap: 20px;
            margin-bottom: 30px;
        }

        .summary-card {
            background: white;
            padding: 20px;
            border-radius: 15px;
            text-align: center;
            box-shadow: 0 4px 6px rgba(0,0,0,0.1);
        }

        .summary-number { font-size: 2.2rem; font-weight: bold; color: #2f6f8f; margin-bottom: 10px; }

        .type-grid {
            display: grid;
            grid-template-columns: repeat(auto-fill, minmax(180px, 1fr));
            gap: 10px;
        }

        .type-stat {
            display: flex;
            justify-content: space-between;
            background: white;
            padding: 10px 15px;
            border-radius: 8px;
            border: 1px solid #e0e0e0;
        }

        .type-stat .count { font-weight: bold; color: #dc3545; }

        table { width: 100%; border-collapse: collapse; font-size: 0.9rem; }
        th, td { padding: 8px 10px; border-bottom: 1px solid #e5e5e5; text-align: right; }
        th { background: #f1f3f8; }
        td.text { text-align: left; font-family: monospace; }

        .empty { color: #777; text-align: center; padding: 40px; }
        """

    def _meta_item(self, label: str, value: Any) -> str:
        return f"""
                <div class="meta-item">
                    <span class="label">{html.escape(label)}:</span>
                    <span class="value">{html.escape(str(value))}</span>
                </div>"""

    def _generate_rejection_stats(self, rejections: Dict) -> str:
        """거절 사유별 통계 HTML 생성"""
        if not rejections:
            return '<div class="type-stat"><span>없음</span><span class="count">0</span></div>'
        return "".join(
            f"""
                <div class="type-stat">
                    <span>{html.escape(self._format_reason(reason))}</span>
                    <span class="count">{count}</span>
                </div>"""
            for reason, count in rejections.items()
        )

    def _generate_profile_table(self, profile: Dict) -> str:
        rows = []
        total = profile.get("total") or 0.0
        for stage, seconds in profile.items():
            if stage in ("total", "valid", "sps"):
                continue
            share = seconds / total if total > 0 else 0.0
            rows.append(f"<tr><td class=\"text\">{html.escape(stage)}</td>"
                        f"<td>{seconds:.3f}</td><td>{share:.1%}</td></tr>")
        rows.append(f"<tr><th class=\"text\">total</th><th>{total:.3f}</th><th></th></tr>")
        return ("<table><tr><th class=\"text\">단계</th><th>초</th><th>비율</th></tr>"
                + "".join(rows) + "</table>")

    def _generate_grasps_html(self, grasps: List) -> str:
        """그래스프 테이블 HTML 생성"""
        if not grasps:
            return '<div class="empty"><h3>유효한 그래스프가 없습니다</h3></div>'

        rows = []
        for idx, grasp in enumerate(grasps):
            links = ", ".join(grasp.contact_links + [f"{l} (static)" for l in grasp.static_links])
            rows.append(f"""
                <tr>
                    <td>{idx}</td>
                    <td>{grasp.pose_id}</td>
                    <td>{grasp.pass_id}</td>
                    <td>{grasp.objective:.2e}</td>
                    <td>{grasp.residual * 1000:.2f}</td>
                    <td>{grasp.depth * 1000:.2f}</td>
                    <td class="text">{html.escape(links)}</td>
                </tr>""")
        header = ("<tr><th>#</th><th>pose</th><th>pass</th><th>objective</th>"
                  "<th>residual (mm)</th><th>depth (mm)</th><th class=\"text\">contacts</th></tr>")
        return "<table>" + header + "".join(rows) + "</table>"

    def _format_reason(self, reason: str) -> str:
        """거절 사유 코드를 읽기 쉬운 형태로 변환"""
        reason_map = {
            "placement_penetration": "배치 침투",
            "no_domains": "도메인 부족",
            "ik_diverged": "IK 발산",
            "collision": "충돌",
            "unstable": "불안정",
            "residual": "접촉 잔차 초과",
        }
        return reason_map.get(reason, reason)


# ========= OBJ export =========
def _to_trimesh(mesh: TriMesh, pose: np.ndarray) -> trimesh.Trimesh:
    return trimesh.Trimesh(vertices=mesh.vertices, faces=mesh.triangles, process=False).apply_transform(pose)


def grasp_scene(model: HandModel, grasp, object_mesh: TriMesh) -> trimesh.Trimesh:
    """핸드 링크 메쉬(FK 적용) + 오브젝트 메쉬(그래스프 포즈 적용)를 하나로 합친 메쉬"""
    transforms = forward_kinematics(model, grasp.q)
    parts = [
        _to_trimesh(link.mesh, transforms[i])
        for i, link in enumerate(model.links)
        if link.mesh is not None
    ]
    parts.append(_to_trimesh(object_mesh, grasp.pose))
    return trimesh.util.concatenate(parts)


def export_grasp_objs(model: HandModel, grasps: List, object_mesh: TriMesh, output_dir: str) -> List[str]:
    """그래스프별 OBJ 파일 저장"""
    os.makedirs(output_dir, exist_ok=True)
    paths = []
    for idx, grasp in enumerate(grasps):
        path = os.path.join(output_dir, f"grasp_{idx:05d}.obj")
        grasp_scene(model, grasp, object_mesh).export(path)
        paths.append(path)
    return paths
