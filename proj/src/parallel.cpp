#include "pop/parallel.hpp"

#include <cstdlib>
#include <string>

#include "pop/errors.hpp"

namespace pop {

std::size_t worker_count() {
  if (const char* env = std::getenv("POP_THREADS"); env && *env) {
    try {
      const long v = std::stol(env);
      if (v >= 1) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
    throw ConfigError(std::string("POP_THREADS must be a positive integer, got '") + env + "'");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace pop
