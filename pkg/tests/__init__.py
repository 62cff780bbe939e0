# Тесты для PM-RobOpt
