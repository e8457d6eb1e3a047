# 命令行入口层
