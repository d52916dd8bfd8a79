#!/usr/bin/env python3
"""
可视化模块：评测结果的 PNG 图表（matplotlib）与手写的最小 SVG
"""

from pathlib import Path
from typing import Dict, List, Optional, Tuple
from xml.sax.saxutils import escape

import matplotlib

# 设置matplotlib使用非交互式后端
matplotlib.use('Agg')

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from audio_dsp import AudioBuffer, mag_phase, stft
from metrics import snr_bin

PALETTE = ['#FF6B6B', '#4ECDC4', '#45B7D1', '#FFA07A', '#98D8C8', '#9B59B6', '#F1C40F', '#34495E']


class Colors:
    RED = "\033[31m"
    GREEN = "\033[32m"
    YELLOW = "\033[33m"
    BLUE = "\033[34m"
    CYAN = "\033[36m"
    RESET = "\033[0m"


def tag_curves(summary: pd.DataFrame, metric: str = "output_snr_db") -> Dict[str, List[Tuple[float, float]]]:
    """每种噪声一条曲线：(输入 SNR 档, 指标均值)"""
    part = summary[(summary["group"] == "noise_tag+snr_bin") & (summary["metric"] == metric)]
    curves: Dict[str, List[Tuple[float, float]]] = {}
    for key, mean in zip(part["key"], part["mean"]):
        tag, _, bin_label = key.rpartition("|")
        curves.setdefault(tag, []).append((float(bin_label), float(mean)))
    return {tag: sorted(points) for tag, points in sorted(curves.items())}


def bin_boxes(summary: pd.DataFrame, metric: str = "stoi_out") -> List[Tuple[float, Dict[str, float]]]:
    """每个输入 SNR 档的箱线统计"""
    part = summary[(summary["group"] == "snr_bin") & (summary["metric"] == metric)]
    boxes = []
    for _, row in part.iterrows():
        stats = {k: float(row[k]) for k in ("min", "q1", "median", "q3", "max", "mean")}
        boxes.append((float(row["key"]), stats))
    return sorted(boxes, key=lambda b: b[0])


# ----------------------------------------------------------------------
# SVG（手写，只用 polyline / rect / line / text）
# ----------------------------------------------------------------------
class _SvgCanvas:
    def __init__(self, width: int = 640, height: int = 400, margin: int = 60):
        self.width, self.height, self.margin = width, height, margin
        self.items: List[str] = []

    def scale(self, x_range: Tuple[float, float], y_range: Tuple[float, float]):
        (x0, x1), (y0, y1) = x_range, y_range
        x1 = x1 if x1 > x0 else x0 + 1.0
        y1 = y1 if y1 > y0 else y0 + 1.0
        w = self.width - 2 * self.margin
        h = self.height - 2 * self.margin

        def sx(x: float) -> float:
            return self.margin + (x - x0) / (x1 - x0) * w

        def sy(y: float) -> float:
            return self.height - self.margin - (y - y0) / (y1 - y0) * h

        return sx, sy

    def line(self, x1, y1, x2, y2, stroke="#000000", width=1.0):
        self.items.append(
            f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" stroke="{stroke}" stroke-width="{width:g}"/>'
        )

    def rect(self, x, y, w, h, fill="#4ECDC4", stroke="#000000"):
        self.items.append(
            f'<rect x="{x:.2f}" y="{y:.2f}" width="{w:.2f}" height="{h:.2f}" fill="{fill}" fill-opacity="0.6" stroke="{stroke}"/>'
        )

    def polyline(self, points, stroke, label):
        coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
        self.items.append(
            f'<polyline points="{coords}" fill="none" stroke="{stroke}" stroke-width="2" data-label="{escape(label)}"/>'
        )

    def text(self, x, y, content, size=12, anchor="middle"):
        self.items.append(
            f'<text x="{x:.2f}" y="{y:.2f}" font-size="{size}" text-anchor="{anchor}" font-family="sans-serif">{escape(content)}</text>'
        )

    def axes(self, title, xlabel, ylabel):
        m, w, h = self.margin, self.width, self.height
        self.line(m, h - m, w - m, h - m)
        self.line(m, m, m, h - m)
        self.text(w / 2, m / 2, title, size=14)
        self.text(w / 2, h - m / 4, xlabel)
        self.text(m / 4, h / 2, ylabel, anchor="start")

    def render(self) -> str:
        head = (
            '<?xml version="1.0" encoding="UTF-8"?>\n'
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{self.width}" height="{self.height}">\n'
        )
        return head + "\n".join(self.items) + "\n</svg>\n"


def render_snr_curves_svg(summary: pd.DataFrame) -> str:
    """平均输出 SNR 随输入 SNR 档变化，每种噪声一条折线"""
    curves = tag_curves(summary, "output_snr_db")
    canvas = _SvgCanvas()
    canvas.axes("Mean output SNR by noise type", "input SNR bin (dB)", "dB")
    if not curves:
        return canvas.render()

    xs = [x for pts in curves.values() for x, _ in pts]
    ys = [y for pts in curves.values() for _, y in pts]
    sx, sy = canvas.scale((min(xs), max(xs)), (min(ys), max(ys)))
    for x in sorted(set(xs)):
        canvas.text(sx(x), canvas.height - canvas.margin + 16, f"{x:g}", size=10)

    for i, (tag, points) in enumerate(curves.items()):
        color = PALETTE[i % len(PALETTE)]
        canvas.polyline([(sx(x), sy(y)) for x, y in points], color, tag)
        canvas.text(canvas.width - canvas.margin + 4, canvas.margin + 14 * i, tag, size=10, anchor="start")
    return canvas.render()


def render_stoi_boxes_svg(summary: pd.DataFrame, metric: str = "stoi_out") -> str:
    """每个输入 SNR 档一个箱形：须线 min..max，箱体 Q1..Q3，中位线"""
    boxes = bin_boxes(summary, metric)
    canvas = _SvgCanvas()
    canvas.axes("STOI by input SNR bin", "input SNR bin (dB)", "STOI")
    if not boxes:
        return canvas.render()

    lo = min(s["min"] for _, s in boxes)
    hi = max(s["max"] for _, s in boxes)
    sx, sy = canvas.scale((-0.5, len(boxes) - 0.5), (min(lo, 0.0), max(hi, 1.0)))
    half = 0.3 * (sx(1) - sx(0))
    for i, (bin_value, s) in enumerate(boxes):
        cx = sx(i)
        canvas.line(cx, sy(s["min"]), cx, sy(s["max"]))
        canvas.line(cx - half / 2, sy(s["min"]), cx + half / 2, sy(s["min"]))
        canvas.line(cx - half / 2, sy(s["max"]), cx + half / 2, sy(s["max"]))
        canvas.rect(cx - half, sy(s["q3"]), 2 * half, sy(s["q1"]) - sy(s["q3"]), fill=PALETTE[i % len(PALETTE)])
        canvas.line(cx - half, sy(s["median"]), cx + half, sy(s["median"]), stroke="#C0392B", width=2)
        canvas.text(cx, canvas.height - canvas.margin + 16, f"{bin_value:g}", size=10)
    return canvas.render()


def write_svgs(summary: pd.DataFrame, output_dir: Path) -> List[Path]:
    output_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, content in [
        ("snr_curves.svg", render_snr_curves_svg(summary)),
        ("stoi_boxes.svg", render_stoi_boxes_svg(summary)),
    ]:
        path = output_dir / name
        with open(path, 'w', encoding='utf-8', newline='') as f:
            f.write(content)
        written.append(path)
        print(f"{Colors.GREEN}  ✓ {name}: {path}{Colors.RESET}")
    return written


# ----------------------------------------------------------------------
# PNG（matplotlib）
# ----------------------------------------------------------------------
def create_visualizations(rows_frame: pd.DataFrame, summary: pd.DataFrame, output_dir: Path, split_name: str = None):
    """生成评测可视化图表"""
    if rows_frame.empty:
        print(f"{Colors.YELLOW}没有数据可供可视化{Colors.RESET}")
        return

    print(f"\n{Colors.YELLOW}生成可视化图表...{Colors.RESET}")
    output_dir.mkdir(parents=True, exist_ok=True)
    prefix = f"{split_name}_" if split_name else ""
    suffix = f"\n({split_name})" if split_name else ""

    # 1. 各噪声类型的输出 SNR 曲线
    fig, ax = plt.subplots(figsize=(10, 6))
    for i, (tag, points) in enumerate(tag_curves(summary, "output_snr_db").items()):
        xs, ys = zip(*points)
        ax.plot(xs, ys, 'o-', linewidth=2, color=PALETTE[i % len(PALETTE)], label=tag)
    ax.set_xlabel('Input SNR (dB)', fontsize=12)
    ax.set_ylabel('Mean output SNR (dB)', fontsize=12)
    ax.set_title('Enhancement by Noise Type' + suffix, fontsize=14, fontweight='bold')
    ax.legend(fontsize=10)
    ax.grid(alpha=0.3, linestyle='--')
    plt.tight_layout()
    plt.savefig(output_dir / f'{prefix}snr_curves.png', dpi=150, bbox_inches='tight')
    plt.close()
    print(f"{Colors.GREEN}  ✓ SNR 曲线图: {output_dir / f'{prefix}snr_curves.png'}{Colors.RESET}")

    # 2. 各输入 SNR 档的 STOI 箱线图
    bins = [snr_bin(v) for v in rows_frame["input_snr_db"]]
    labels = sorted(set(bins))
    box_data = [rows_frame["stoi_out"][np.array(bins) == b].to_numpy() for b in labels]
    fig, ax = plt.subplots(figsize=(10, 6))
    bp = ax.boxplot(box_data, patch_artist=True, showmeans=True)
    ax.set_xticks(range(1, len(labels) + 1))
    ax.set_xticklabels([f"{b:g}" for b in labels])
    for patch, color in zip(bp['boxes'], PALETTE):
        patch.set_facecolor(color)
        patch.set_alpha(0.6)
    ax.set_xlabel('Input SNR (dB)', fontsize=12)
    ax.set_ylabel('STOI', fontsize=12)
    ax.set_title('STOI Distribution by Input SNR' + suffix, fontsize=14, fontweight='bold')
    ax.set_ylim(0, 1.05)
    ax.grid(axis='y', alpha=0.3, linestyle='--')
    plt.tight_layout()
    plt.savefig(output_dir / f'{prefix}stoi_boxes.png', dpi=150, bbox_inches='tight')
    plt.close()
    print(f"{Colors.GREEN}  ✓ STOI 箱线图: {output_dir / f'{prefix}stoi_boxes.png'}{Colors.RESET}")

    # 3. 各噪声类型的平均 SNR 提升
    gains = rows_frame.groupby("noise_tag")["snr_improvement_db"].mean().sort_index()
    fig, ax = plt.subplots(figsize=(10, 6))
    bars = ax.bar(range(len(gains)), gains.to_numpy(), color=[PALETTE[i % len(PALETTE)] for i in range(len(gains))], alpha=0.8, edgecolor='black')
    ax.set_xticks(range(len(gains)))
    ax.set_xticklabels(list(gains.index), fontsize=11)
    ax.set_ylabel('Mean SNR improvement (dB)', fontsize=12)
    ax.set_title('SNR Improvement by Noise Type' + suffix, fontsize=14, fontweight='bold')
    ax.axhline(0.0, color='black', linewidth=1)
    ax.grid(axis='y', alpha=0.3, linestyle='--')
    for bar in bars:
        height = bar.get_height()
        ax.text(bar.get_x() + bar.get_width()/2., height, f'{height:.2f}',
                ha='center', va='bottom', fontsize=10, fontweight='bold')
    plt.tight_layout()
    plt.savefig(output_dir / f'{prefix}snr_improvement.png', dpi=150, bbox_inches='tight')
    plt.close()
    print(f"{Colors.GREEN}  ✓ SNR 提升柱状图: {output_dir / f'{prefix}snr_improvement.png'}{Colors.RESET}")

    print(f"{Colors.GREEN}✓ 所有可视化图表已保存到: {output_dir}{Colors.RESET}")


def plot_enhancement(noisy: AudioBuffer, enhanced: AudioBuffer, output_path: Path,
                     win_len: int = 512, hop: int = 128, clean: Optional[AudioBuffer] = None):
    """带噪 / 增强（/ 纯净）的波形与对数幅度谱对比"""
    panels = [("Noisy", noisy), ("Enhanced", enhanced)]
    if clean is not None:
        panels.append(("Clean", clean))

    fig, axes = plt.subplots(2, len(panels), figsize=(6 * len(panels), 7), squeeze=False)
    for col, (name, buf) in enumerate(panels):
        t = np.arange(len(buf)) / buf.sample_rate
        axes[0, col].plot(t, buf.samples, linewidth=0.5, color=PALETTE[col])
        axes[0, col].set_title(name, fontsize=13, fontweight='bold')
        axes[0, col].set_xlabel('Time (s)')
        axes[0, col].set_ylim(-1.0, 1.0)

        mag = mag_phase(stft(buf, win_len, hop)).magnitude
        db = 20.0 * np.log10(mag.T + 1e-8)
        axes[1, col].imshow(
            db, origin='lower', aspect='auto', cmap='magma',
            extent=[0, buf.duration, 0, buf.sample_rate / 2000.0],
            vmin=db.max() - 80.0, vmax=db.max(),
        )
        axes[1, col].set_xlabel('Time (s)')
        axes[1, col].set_ylabel('Frequency (kHz)')

    plt.tight_layout()
    output_path.parent.mkdir(parents=True, exist_ok=True)
    plt.savefig(output_path, dpi=150, bbox_inches='tight')
    plt.close()
    print(f"{Colors.GREEN}  ✓ 增强对比图: {output_path}{Colors.RESET}")
