# AIF-Router：主動推論邊緣路由器
__version__ = "1.0.0"
