// SPDX-License-Identifier: Apache-2.0

#include "cgsd/digest.hpp"

#include <charconv>

namespace cgsd {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

}  // namespace cgsd
