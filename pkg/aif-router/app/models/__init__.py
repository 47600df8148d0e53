# 數據模型