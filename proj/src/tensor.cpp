#include "encvit/tensor.hpp"

#include <sstream>

namespace encvit {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::string ImageGeometry::to_string() const {
  return std::to_string(channels) + "x" + std::to_string(height) + "x" +
         std::to_string(width);
}

ImageGeometry parse_geometry(const std::string& text) {
  ImageGeometry g;
  char x1 = 0, x2 = 0;
  std::istringstream is(text);
  long c = 0, h = 0, w = 0;
  if (!(is >> c >> x1 >> h >> x2 >> w) || x1 != 'x' || x2 != 'x' ||
      !is.eof() || c <= 0 || h <= 0 || w <= 0) {
    throw InvalidInput("tensor: geometry must look like CxHxW, got '" + text +
                       "'");
  }
  g.channels = static_cast<std::uint32_t>(c);
  g.height = static_cast<std::uint32_t>(h);
  g.width = static_cast<std::uint32_t>(w);
  return g;
}

BlockGrid::BlockGrid(ImageGeometry geometry, std::uint32_t block_size)
    : image(geometry), block(block_size) {
  detail::require(block > 0, "tensor", "block size must be positive");
  detail::require(image.channels > 0 && image.height > 0 && image.width > 0,
                  "tensor", "image extents must be positive");
  detail::require(image.height % block == 0 && image.width % block == 0,
                  "tensor",
                  "image " + image.to_string() +
                      " is not divisible into blocks of " +
                      std::to_string(block));
}

std::size_t BlockGrid::offset(std::size_t b, std::size_t k) const {
  const std::size_t by = b / blocks_x();
  const std::size_t bx = b % blocks_x();
  const std::size_t mm = std::size_t{block} * block;
  const std::size_t c = k / mm;
  const std::size_t i = (k % mm) / block;
  const std::size_t j = k % block;
  return (c * image.height + by * block + i) * image.width + bx * block + j;
}

}  // namespace encvit
