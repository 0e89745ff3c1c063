#include <cstdio>

#include "mmfuse/version.hpp"

int main() {
  std::printf("mmfuse %s\n", mmfuse::kBuildId);
  return 0;
}
