#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace mad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape);

/// Dense row-major tensor. Batched images use NCHW.
template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(numel(shape)) {}
  Tensor(Shape s, T fill) : shape(std::move(s)), data(numel(shape), fill) {}
  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {}

  std::size_t size() const { return data.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }
  std::span<T> span() { return data; }
  std::span<const T> span() const { return data; }
};

/// Image geometry in pixels.
struct ImageShape {
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;

  std::size_t size() const { return channels * height * width; }
  bool operator==(const ImageShape&) const = default;
};

/// Float32 images in [0,1] with integer labels; the unit every module exchanges.
struct LabeledImages {
  ImageShape shape;
  std::vector<float> pixels;  // count * shape.size()
  std::vector<int> labels;

  std::size_t count() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  std::span<const float> image(std::size_t i) const {
    return std::span<const float>(pixels).subspan(i * shape.size(), shape.size());
  }
  std::span<float> image(std::size_t i) {
    return std::span<float>(pixels).subspan(i * shape.size(), shape.size());
  }
  void push_back(std::span<const float> img, int label) {
    pixels.insert(pixels.end(), img.begin(), img.end());
    labels.push_back(label);
  }
  LabeledImages subset(std::span<const std::size_t> indices) const;
  LabeledImages slice(std::size_t begin, std::size_t end) const;
};

/// Converts a batch to a double NCHW tensor.
Tensor<double> to_tensor(const LabeledImages& images);
Tensor<double> to_tensor(std::span<const float> pixels, std::size_t count, const ImageShape& shape);

}  // namespace mad
