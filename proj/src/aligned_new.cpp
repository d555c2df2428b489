#include <cstdlib>
#include <new>

// Blocks of 64 bytes or more start on a cache-line boundary, so vectorized
// kernels take the same peeling path, and sum in the same order, on every run.

void* operator new(std::size_t n) {
  if (n == 0) n = 1;
  void* p = n >= 64 ? std::aligned_alloc(64, (n + 63) & ~static_cast<std::size_t>(63)) : std::malloc(n);
  if (!p) throw std::bad_alloc();
  return p;
}

void operator delete(void* p) noexcept { std::free(p); }
void operator delete(void* p, std::size_t) noexcept { std::free(p); }
