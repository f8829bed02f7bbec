"""Address geometry: 64-byte lines, 4 KiB pages, dual physical/virtual line ids."""

from __future__ import annotations

from dataclasses import dataclass

LINE_SIZE = 64
LINE_SHIFT = 6
PAGE_SIZE = 4096
PAGE_SHIFT = 12
LINES_PER_PAGE = PAGE_SIZE // LINE_SIZE

# Synthetic page tables live above this physical line; user data stays below.
PAGE_TABLE_BASE_LINE = 1 << 40


def line_of(addr: int) -> int:
    return addr >> LINE_SHIFT


def page_of(addr: int) -> int:
    return addr >> PAGE_SHIFT


def line_in_page(addr: int) -> int:
    return (addr >> LINE_SHIFT) & (LINES_PER_PAGE - 1)


@dataclass(frozen=True)
class LineAddr:
    """A line-granular address carrying both its physical and virtual id.

    The low ``LINES_PER_PAGE`` index bits of both ids are equal because
    translation preserves the page offset; set indexing below page size can
    therefore use either id.
    """

    paddr_line: int
    vaddr_line: int

    def __post_init__(self):
        mask = LINES_PER_PAGE - 1
        assert (self.paddr_line & mask) == (self.vaddr_line & mask), (
            "physical and virtual line ids must share their in-page bits"
        )
