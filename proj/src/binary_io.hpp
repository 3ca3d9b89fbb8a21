// Copyright 2026 The bracplus Authors
// SPDX-License-Identifier: Apache-2.0

// Little-endian primitives shared by the checkpoint and dataset formats.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "bracplus/errors.hpp"

namespace bracplus::io {

static_assert(std::endian::native == std::endian::little,
              "binary formats are written as native little-endian");

template <class T>
void write_pod(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

inline void write_doubles(std::ostream& os, const double* data, std::size_t n) {
  os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
}

class Reader {
 public:
  Reader(std::istream& is, std::string what) : is_(is), what_(std::move(what)) {}

  template <class T>
  T pod() {
    T value{};
    bytes(reinterpret_cast<char*>(&value), sizeof(T));
    return value;
  }

  void bytes(char* dst, std::size_t n) {
    is_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) {
      throw FormatError(what_ + ": truncated file");
    }
  }

  void doubles(double* dst, std::size_t n) { bytes(reinterpret_cast<char*>(dst), n * sizeof(double)); }

  void expect_magic(const char (&magic)[6]) {
    char got[6];
    bytes(got, 6);
    if (std::memcmp(got, magic, 6) != 0) {
      throw FormatError(what_ + ": bad magic, expected " + std::string(magic, 6));
    }
  }

  bool at_end() { return is_.peek() == std::char_traits<char>::eof(); }

 private:
  std::istream& is_;
  std::string what_;
};

}  // namespace bracplus::io
