#include "maskcons/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace maskcons {

static unsigned char to_byte(real v) {
  const real s = v * real(255) + real(0.5);
  return static_cast<unsigned char>(std::clamp(s, real(0), real(255)));
}

void write_pgm(const std::string& path, const Tensor& gray) {
  check(gray.ndim() == 2, "write_pgm: image must be H x W");
  std::ofstream os(path, std::ios::binary);
  require(os.is_open(), "write_pgm: cannot open " + path);
  os << "P5\n" << gray.extent(1) << " " << gray.extent(0) << "\n255\n";
  std::vector<unsigned char> buf(gray.size());
  for (size_t i = 0; i < gray.size(); ++i) buf[i] = to_byte(gray[i]);
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  require(os.good(), "write_pgm: write failed");
}

void write_pgm_raw(const std::string& path, const Tensor& raw) {
  check(raw.ndim() == 2, "write_pgm_raw: image must be H x W");
  std::ofstream os(path, std::ios::binary);
  require(os.is_open(), "write_pgm_raw: cannot open " + path);
  os << "P5\n" << raw.extent(1) << " " << raw.extent(0) << "\n255\n";
  std::vector<unsigned char> buf(raw.size());
  for (size_t i = 0; i < raw.size(); ++i) {
    const real v = raw[i];
    check(v >= 0 && v <= 255 && v == std::floor(v),
          "write_pgm_raw: values must be integers in [0,255]");
    buf[i] = static_cast<unsigned char>(v);
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  require(os.good(), "write_pgm_raw: write failed");
}

void write_ppm(const std::string& path, const Tensor& rgb) {
  check(rgb.ndim() == 3 && rgb.extent(0) == 3, "write_ppm: image must be 3 x H x W");
  const size_t h = rgb.extent(1), w = rgb.extent(2);
  std::ofstream os(path, std::ios::binary);
  require(os.is_open(), "write_ppm: cannot open " + path);
  os << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> buf(3 * h * w);
  for (size_t y = 0; y < h; ++y)
    for (size_t x = 0; x < w; ++x)
      for (size_t c = 0; c < 3; ++c) buf[(y * w + x) * 3 + c] = to_byte(rgb.at3(c, y, x));
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  require(os.good(), "write_ppm: write failed");
}

// Skips whitespace and '#' comments between header tokens.
static int next_header_int(std::istream& is) {
  for (;;) {
    int c = is.peek();
    if (c == '#') {
      std::string line;
      std::getline(is, line);
    } else if (std::isspace(c)) {
      is.get();
    } else {
      break;
    }
  }
  int v = -1;
  is >> v;
  return v;
}

static std::vector<unsigned char> read_pnm(const std::string& path, const std::string& magic,
                                           size_t channels, size_t& h, size_t& w) {
  std::ifstream is(path, std::ios::binary);
  require(is.is_open(), "read_pnm: cannot open " + path);
  std::string m(2, '\0');
  is.read(m.data(), 2);
  require(m == magic, "read_pnm: " + path + " is not " + magic);
  const int wi = next_header_int(is);
  const int hi = next_header_int(is);
  const int maxval = next_header_int(is);
  require(wi > 0 && hi > 0 && maxval == 255, "read_pnm: unsupported header in " + path);
  is.get();  // single whitespace after maxval
  h = static_cast<size_t>(hi);
  w = static_cast<size_t>(wi);
  std::vector<unsigned char> buf(channels * h * w);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  require(is.gcount() == static_cast<std::streamsize>(buf.size()),
          "read_pnm: truncated pixel data in " + path);
  return buf;
}

Tensor read_pgm(const std::string& path) {
  size_t h = 0, w = 0;
  auto buf = read_pnm(path, "P5", 1, h, w);
  Tensor t({h, w});
  for (size_t i = 0; i < buf.size(); ++i) t[i] = static_cast<real>(buf[i]);
  return t;
}

Tensor read_ppm(const std::string& path) {
  size_t h = 0, w = 0;
  auto buf = read_pnm(path, "P6", 3, h, w);
  Tensor t({3, h, w});
  for (size_t y = 0; y < h; ++y)
    for (size_t x = 0; x < w; ++x)
      for (size_t c = 0; c < 3; ++c)
        t.at3(c, y, x) = static_cast<real>(buf[(y * w + x) * 3 + c]);
  return t;
}

struct CsvWriter::Impl {
  std::ofstream os;
  size_t n_cols;
};

CsvWriter::CsvWriter(const std::string& path, const std::vector<std::string>& columns)
    : impl_(new Impl) {
  impl_->os.open(path);
  require(impl_->os.is_open(), "CsvWriter: cannot open " + path);
  impl_->n_cols = columns.size();
  for (size_t i = 0; i < columns.size(); ++i)
    impl_->os << (i ? "," : "") << columns[i];
  impl_->os << "\n";
}

void CsvWriter::row(const std::vector<std::string>& cells) {
  check(cells.size() == impl_->n_cols, "CsvWriter: wrong cell count");
  for (size_t i = 0; i < cells.size(); ++i)
    impl_->os << (i ? "," : "") << cells[i];
  impl_->os << "\n";
}

CsvWriter::~CsvWriter() {
  impl_->os.flush();
  delete impl_;
}

std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace maskcons
