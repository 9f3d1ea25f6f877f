/**
 * View transform between canvas (view) space and original-image pixel space.
 *
 * An image pixel (row, col) occupies the unit square [col, col+1) x
 * [row, row+1) in image units; its center maps to view space through the
 * zoom/pan affine. The round trip pixel -> view center -> pixel is exact at
 * every zoom level.
 */

export interface ViewPoint {
  x: number;
  y: number;
}

export interface ImagePixel {
  row: number;
  col: number;
}

export class ViewTransform {
  constructor(
    public zoom: number = 1,
    public panX: number = 0,
    public panY: number = 0,
  ) {
    if (zoom <= 0) throw new Error(`zoom must be positive, got ${zoom}`);
  }

  /** Center of an image pixel in view coordinates. */
  imageToView(p: ImagePixel): ViewPoint {
    return {
      x: (p.col + 0.5) * this.zoom + this.panX,
      y: (p.row + 0.5) * this.zoom + this.panY,
    };
  }

  /** Image pixel under a view-space point (clamped to the image bounds). */
  viewToImage(v: ViewPoint, height: number, width: number): ImagePixel {
    const col = Math.floor((v.x - this.panX) / this.zoom);
    const row = Math.floor((v.y - this.panY) / this.zoom);
    return {
      row: Math.min(Math.max(row, 0), height - 1),
      col: Math.min(Math.max(col, 0), width - 1),
    };
  }

  zoomAt(factor: number, anchor: ViewPoint): ViewTransform {
    const zoom = this.zoom * factor;
    return new ViewTransform(
      zoom,
      anchor.x - (anchor.x - this.panX) * factor,
      anchor.y - (anchor.y - this.panY) * factor,
    );
  }

  pan(dx: number, dy: number): ViewTransform {
    return new ViewTransform(this.zoom, this.panX + dx, this.panY + dy);
  }
}

/** Axis-aligned box in image pixels from two view-space drag corners. */
export function dragToBox(
  a: ViewPoint,
  b: ViewPoint,
  t: ViewTransform,
  height: number,
  width: number,
): { row_min: number; col_min: number; row_max: number; col_max: number } {
  const p1 = t.viewToImage(a, height, width);
  const p2 = t.viewToImage(b, height, width);
  return {
    row_min: Math.min(p1.row, p2.row),
    col_min: Math.min(p1.col, p2.col),
    row_max: Math.max(p1.row, p2.row),
    col_max: Math.max(p1.col, p2.col),
  };
}
