#pragma once

#include <charconv>
#include <istream>
#include <ostream>
#include <string>
#include <system_error>

#include "lgabc/errors.hpp"
#include "lgabc/kernel_linalg.hpp"

namespace lgabc::io {

/// Shortest decimal form that parses back to the identical double.
inline std::string format_double(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& tok) {
  double v = 0.0;
  auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) {
    throw InvalidArgument("malformed number '" + tok + "'");
  }
  return v;
}

inline std::string next_token(std::istream& in) {
  std::string tok;
  if (!(in >> tok)) throw InvalidArgument("unexpected end of input");
  return tok;
}

inline void expect(std::istream& in, const std::string& want) {
  const std::string got = next_token(in);
  if (got != want) throw InvalidArgument("expected '" + want + "' but found '" + got + "'");
}

inline long read_long(std::istream& in) {
  const std::string tok = next_token(in);
  long v = 0;
  auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) {
    throw InvalidArgument("malformed integer '" + tok + "'");
  }
  return v;
}

inline double read_double(std::istream& in) { return parse_double(next_token(in)); }

inline void write_vector(std::ostream& out, const Vector& v) {
  for (Index i = 0; i < v.size(); ++i) out << (i ? " " : "") << format_double(v(i));
  out << '\n';
}

inline Vector read_vector(std::istream& in, Index n) {
  Vector v(n);
  for (Index i = 0; i < n; ++i) v(i) = read_double(in);
  return v;
}

inline void write_matrix(std::ostream& out, const Matrix& m) {
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) out << (c ? " " : "") << format_double(m(r, c));
    out << '\n';
  }
}

inline Matrix read_matrix(std::istream& in, Index rows, Index cols) {
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = read_double(in);
  return m;
}

}  // namespace lgabc::io
