#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "tbd/pipeline.hpp"

int main(int argc, char** argv) {
  tbd::pipeline::tune_allocator();
  doctest::Context ctx(argc, argv);
  return ctx.run();
}
