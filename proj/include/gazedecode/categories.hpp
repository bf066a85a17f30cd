#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>

#include "gazedecode/errors.hpp"

namespace gazedecode {

inline constexpr std::size_t kNumCategories = 10;

inline constexpr std::array<std::string_view, kNumCategories> kCategoryNames = {
    "Blouse", "T-Shirt", "Jean", "Shorts", "Skirt",
    "Cardigan", "Dress", "Jacket", "Sweater", "Tank"};

// Garment category, 0..9.
class CategoryId {
 public:
  constexpr CategoryId() = default;
  constexpr explicit CategoryId(int id) : id_(id) {
    if (id < 0 || id >= static_cast<int>(kNumCategories))
      throw ParameterError("category id " + std::to_string(id) + " outside [0,10)");
  }

  static CategoryId from_name(std::string_view name) {
    for (std::size_t i = 0; i < kNumCategories; ++i)
      if (kCategoryNames[i] == name) return CategoryId(static_cast<int>(i));
    throw ParameterError("unknown category '" + std::string(name) + "'");
  }

  constexpr int value() const { return id_; }
  constexpr std::size_t index() const { return static_cast<std::size_t>(id_); }
  std::string name() const { return std::string(kCategoryNames[index()]); }

  friend constexpr auto operator<=>(CategoryId, CategoryId) = default;

 private:
  int id_ = 0;
};

}  // namespace gazedecode
