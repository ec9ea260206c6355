"""
Reprogram Lab

对抗重编程（adversarial reprogramming）攻击与状态检测防御的桌面级仿真框架
"""

__version__ = '0.1.0'
