#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace trm {

inline constexpr int kMaxGridSide = 30;
inline constexpr int kNumColors = 10;
inline constexpr int kPadToken = 0;
inline constexpr int kVocabSize = kNumColors + 1;  // PAD + colors 0..9

// Rectangular array of color cells, row-major, 1..30 per side.
struct Grid {
  int height = 1;
  int width = 1;
  std::vector<uint8_t> cells = {0};

  uint8_t at(int row, int col) const { return cells[static_cast<size_t>(row) * width + col]; }
  uint8_t& at(int row, int col) { return cells[static_cast<size_t>(row) * width + col]; }

  bool operator==(const Grid& other) const = default;
};

// Validates invariants and throws GridBoundsError on violation.
Grid make_grid(int height, int width, std::vector<uint8_t> cells);

// Convenience: build from nested rows (used heavily in tests and JSON io).
Grid make_grid(const std::vector<std::vector<int>>& rows);

// Fixed square canvas of tokens over {PAD=0, COLOR_0..COLOR_9 = 1..10}.
// The production canvas is 30x30 (900 tokens); smaller sides are used by
// reduced test configurations.
struct TokenCanvas {
  int side = kMaxGridSide;
  std::vector<uint8_t> tokens;

  uint8_t at(int row, int col) const { return tokens[static_cast<size_t>(row) * side + col]; }
  uint8_t& at(int row, int col) { return tokens[static_cast<size_t>(row) * side + col]; }

  bool operator==(const TokenCanvas& other) const = default;
};

TokenCanvas empty_canvas(int side = kMaxGridSide);

// Writes grid cell (r,c) as token value cell+1 at canvas position (r,c); PAD elsewhere.
TokenCanvas encode_grid(const Grid& grid, int side = kMaxGridSide);

// Total decoder for possibly ill-formed predicted canvases. Height is the
// length of the maximal prefix of rows containing at least one non-PAD token,
// width likewise over columns; interior PADs map to color 0. A canvas whose
// (0,0) token is PAD decodes to the 1x1 grid [[0]].
Grid decode_grid(const TokenCanvas& canvas);

using GridDigest = uint64_t;

// FNV-1a 64 over [h:u8][w:u8][cells row-major]; bit-exact across platforms.
GridDigest canonical_digest(const Grid& grid);

std::string to_string(const Grid& grid);

}  // namespace trm
