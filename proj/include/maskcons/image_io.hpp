#pragma once

#include <string>
#include <vector>

#include "maskcons/tensor.hpp"

namespace maskcons {

// Binary PGM (P5) / PPM (P6), maxval 255.

// gray: H x W with values in [0,1]; scaled to 0..255.
void write_pgm(const std::string& path, const Tensor& gray);
// raw: H x W with integer values in [0,255]; written verbatim (labelmaps).
void write_pgm_raw(const std::string& path, const Tensor& raw);
// rgb: 3 x H x W with values in [0,1].
void write_ppm(const std::string& path, const Tensor& rgb);

// Readers return pixel values verbatim as reals in [0,255].
Tensor read_pgm(const std::string& path);   // H x W
Tensor read_ppm(const std::string& path);   // 3 x H x W

// Minimal CSV writer: header row then numeric rows, '\n' line ends.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& columns);
  void row(const std::vector<std::string>& cells);
  ~CsvWriter();

 private:
  struct Impl;
  Impl* impl_;
};

std::string fmt_real(double v);  // round-trippable formatting for reports

}  // namespace maskcons
