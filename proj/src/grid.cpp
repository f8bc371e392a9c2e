#include "trm/grid.hpp"

#include <sstream>

#include "trm/errors.hpp"
#include "trm/rng.hpp"

namespace trm {

Grid make_grid(int height, int width, std::vector<uint8_t> cells) {
  if (height < 1 || height > kMaxGridSide || width < 1 || width > kMaxGridSide) {
    raise(ErrorCode::GridBoundsError,
          "grid size " + std::to_string(height) + "x" + std::to_string(width) +
              " outside 1.." + std::to_string(kMaxGridSide));
  }
  if (cells.size() != static_cast<size_t>(height) * width) {
    raise(ErrorCode::GridBoundsError, "cell count does not match height*width");
  }
  for (uint8_t c : cells) {
    if (c >= kNumColors) {
      raise(ErrorCode::GridBoundsError, "cell value " + std::to_string(c) + " outside 0..9");
    }
  }
  return Grid{height, width, std::move(cells)};
}

Grid make_grid(const std::vector<std::vector<int>>& rows) {
  if (rows.empty()) raise(ErrorCode::GridBoundsError, "empty grid");
  const int height = static_cast<int>(rows.size());
  const int width = static_cast<int>(rows[0].size());
  std::vector<uint8_t> cells;
  cells.reserve(static_cast<size_t>(height) * width);
  for (const auto& row : rows) {
    if (static_cast<int>(row.size()) != width) {
      raise(ErrorCode::GridBoundsError, "ragged grid rows");
    }
    for (int value : row) {
      if (value < 0 || value >= kNumColors) {
        raise(ErrorCode::GridBoundsError, "cell value " + std::to_string(value) + " outside 0..9");
      }
      cells.push_back(static_cast<uint8_t>(value));
    }
  }
  return make_grid(height, width, std::move(cells));
}

TokenCanvas empty_canvas(int side) {
  TokenCanvas canvas;
  canvas.side = side;
  canvas.tokens.assign(static_cast<size_t>(side) * side, kPadToken);
  return canvas;
}

TokenCanvas encode_grid(const Grid& grid, int side) {
  if (grid.height > side || grid.width > side) {
    raise(ErrorCode::GridBoundsError, "grid does not fit the canvas");
  }
  TokenCanvas canvas = empty_canvas(side);
  for (int r = 0; r < grid.height; ++r) {
    for (int c = 0; c < grid.width; ++c) {
      canvas.at(r, c) = static_cast<uint8_t>(grid.at(r, c) + 1);
    }
  }
  return canvas;
}

Grid decode_grid(const TokenCanvas& canvas) {
  const int side = canvas.side;
  if (canvas.tokens.empty() || canvas.tokens[0] == kPadToken) {
    return Grid{1, 1, {0}};
  }
  auto row_has_content = [&](int r) {
    for (int c = 0; c < side; ++c) {
      if (canvas.at(r, c) != kPadToken) return true;
    }
    return false;
  };
  auto col_has_content = [&](int c) {
    for (int r = 0; r < side; ++r) {
      if (canvas.at(r, c) != kPadToken) return true;
    }
    return false;
  };
  int height = 0;
  while (height < side && row_has_content(height)) ++height;
  int width = 0;
  while (width < side && col_has_content(width)) ++width;
  if (height == 0 || width == 0) return Grid{1, 1, {0}};

  Grid grid;
  grid.height = height;
  grid.width = width;
  grid.cells.resize(static_cast<size_t>(height) * width);
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      const uint8_t token = canvas.at(r, c);
      grid.at(r, c) = token == kPadToken ? 0 : static_cast<uint8_t>(token - 1);
    }
  }
  return grid;
}

GridDigest canonical_digest(const Grid& grid) {
  uint64_t h = 0xcbf29ce484222325ULL;
  const uint8_t header[2] = {static_cast<uint8_t>(grid.height), static_cast<uint8_t>(grid.width)};
  h = fnv1a64(header, 2, h);
  return fnv1a64(grid.cells.data(), grid.cells.size(), h);
}

std::string to_string(const Grid& grid) {
  std::ostringstream out;
  for (int r = 0; r < grid.height; ++r) {
    for (int c = 0; c < grid.width; ++c) {
      out << static_cast<int>(grid.at(r, c));
      if (c + 1 < grid.width) out << ' ';
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace trm
