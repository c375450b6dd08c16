#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "xmodseg/imgio.hpp"
#include "xmodseg/tensor.hpp"

// Loading preprocessed slice directories into training tensors.
//
// Network intensity convention: NORM01 slices feed the nets as-is;
// STANDARDIZED slices (range [0, 1000]) are divided by 1000. Synthetic CT
// leaves the generator on the NORM01 scale directly.

namespace xmodseg::dataset {

namespace fs = std::filesystem;

inline constexpr double kStandardizedNetScale = 1.0 / 1000.0;

inline bool is_preprocessed(const Slice& s) {
  return s.intensity_kind == IntensityKind::NORM01 ||
         s.intensity_kind == IntensityKind::STANDARDIZED;
}

/// Slice pixels on the network scale.
template <typename T>
std::vector<T> to_net(const Slice& s) {
  require(is_preprocessed(s),
          "slice '" + s.id + "' is not preprocessed (kind " +
              to_string(s.intensity_kind) + "); expected NORM01 or STANDARDIZED");
  const double scale =
      s.intensity_kind == IntensityKind::STANDARDIZED ? kStandardizedNetScale : 1.0;
  std::vector<T> out(s.pixels.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>(s.pixels[i] * scale);
  return out;
}

template <typename T>
struct SliceSet {
  std::vector<std::string> ids;
  std::vector<std::vector<T>> pixels;  // net scale, one vector per slice
  int height = 0, width = 0;

  std::size_t size() const { return ids.size(); }
};

/// Loads every slice PNG in a directory (sorted by id) onto the net scale.
/// All slices must share one shape.
template <typename T>
SliceSet<T> load_slice_dir(const fs::path& dir) {
  SliceSet<T> set;
  const auto ids = imgio::list_ids(dir);
  require(!ids.empty(), "no slices found in " + dir.string());
  for (const auto& id : ids) {
    Slice s = imgio::load_slice((dir / (id + ".png")).string());
    if (set.ids.empty()) {
      set.height = s.height();
      set.width = s.width();
    } else {
      require(s.height() == set.height && s.width() == set.width,
              "slice shape mismatch in " + dir.string() + " at id " + id);
    }
    set.ids.push_back(id);
    set.pixels.push_back(to_net<T>(s));
  }
  return set;
}

/// Stacks the picked slices into a {B,1,H,W} tensor.
template <typename T>
nn::Tensor<T> make_batch(const SliceSet<T>& set, const std::vector<std::size_t>& pick) {
  require(!pick.empty(), "make_batch: empty batch");
  const auto hw = static_cast<std::size_t>(set.height) * set.width;
  std::vector<T> data(pick.size() * hw);
  for (std::size_t k = 0; k < pick.size(); ++k)
    std::copy_n(set.pixels[pick[k]].data(), hw, data.data() + k * hw);
  return nn::Tensor<T>::leaf(
      {static_cast<int>(pick.size()), 1, set.height, set.width}, std::move(data),
      false);
}

}  // namespace xmodseg::dataset
