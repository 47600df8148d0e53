"""AIF-Router 例外定義"""


class AIFRouterError(Exception):
    """所有路由器錯誤的基底類別"""


class InvalidStateError(AIFRouterError, ValueError):
    """狀態元組欄位超出 {0,1,2}"""


class InvalidIndexError(AIFRouterError, ValueError):
    """狀態索引超出 [0, 243)"""


class InvalidObservationError(AIFRouterError, ValueError):
    """觀測值超出 bin 基數"""


class DegenerateEvidenceError(AIFRouterError):
    """先驗與似然的乘積總質量為零"""


class ModelFormatError(AIFRouterError):
    """模型檔格式或維度不符"""


class ConfigurationError(AIFRouterError):
    """情境 / 實驗設定載入失敗"""


class ReportError(AIFRouterError):
    """報告輸出失敗"""
