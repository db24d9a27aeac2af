use pfod::{BBox, Image};

pub const CORRECT: [f64; 3] = [0.0, 1.0, 0.0];
pub const INCORRECT: [f64; 3] = [1.0, 0.0, 0.0];

/// RGB copy of `image` (grayscale is replicated).
pub fn to_rgb(image: &Image) -> Image {
    let mut out = Image::new(image.width, image.height, 3);
    for y in 0..image.height {
        for x in 0..image.width {
            for c in 0..3 {
                let src = if image.channels == 3 { c } else { 0 };
                out.set(x, y, c, image.get(x, y, src));
            }
        }
    }
    out
}

/// Draws a one-pixel outline of `b`, clipped to the image.
pub fn draw_box(img: &mut Image, b: &BBox, color: [f64; 3]) {
    if img.width == 0 || img.height == 0 {
        return;
    }
    let clamp = |v: f64, hi: usize| (v.max(0.0) as usize).min(hi - 1);
    let x0 = clamp(b.x.floor(), img.width);
    let y0 = clamp(b.y.floor(), img.height);
    let x1 = clamp(b.right().ceil() - 1.0, img.width);
    let y1 = clamp(b.bottom().ceil() - 1.0, img.height);
    let mut put = |x: usize, y: usize| {
        for (c, v) in color.iter().enumerate() {
            img.set(x, y, c, *v);
        }
    };
    for x in x0..=x1 {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1 {
        put(x0, y);
        put(x1, y);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outline_only() {
        let mut img = to_rgb(&Image::filled(10, 10, 1, 0.5));
        draw_box(&mut img, &BBox::new(2.0, 2.0, 4.0, 4.0), CORRECT);
        assert_eq!(img.get(2, 2, 1), 1.0);
        assert_eq!(img.get(5, 5, 1), 1.0);
        assert_eq!(img.get(3, 3, 1), 0.5);
        assert_eq!(img.get(6, 6, 1), 0.5);
        assert_eq!(img.get(2, 4, 0), 0.0);
    }

    #[test]
    fn boxes_past_the_border_are_clipped() {
        let mut img = to_rgb(&Image::filled(4, 4, 1, 0.0));
        draw_box(&mut img, &BBox::new(-3.0, 2.0, 20.0, 9.0), INCORRECT);
        assert_eq!(img.get(0, 2, 0), 1.0);
        assert_eq!(img.get(3, 3, 0), 1.0);
    }
}
