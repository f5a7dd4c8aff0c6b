#include <cstdlib>
#include <string>

#include "stvg/kernels.hpp"

namespace stvg::kernels {

#ifndef STVG_HAVE_AVX2
const KernelTable* avx2_kernels() { return nullptr; }
#endif
#ifndef STVG_HAVE_NEON
const KernelTable* neon_kernels() { return nullptr; }
#endif

namespace {

const KernelTable& select() {
  const char* env = std::getenv("STVG_KERNELS");
  const std::string want = env ? env : "auto";
  if (want == "scalar") return scalar_kernels();
  if (want == "avx2" || want == "auto") {
    if (const KernelTable* t = avx2_kernels()) return *t;
  }
  if (want == "neon" || want == "auto") {
    if (const KernelTable* t = neon_kernels()) return *t;
  }
  return scalar_kernels();
}

}  // namespace

const KernelTable& active() {
  static const KernelTable& table = select();
  return table;
}

}  // namespace stvg::kernels
