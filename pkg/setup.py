from setuptools import setup

def main():
    setup(
        name='DRNet-Py',
        python_requires='>=3.8',
        version='0.1.0',
        description='DRNet-Py is a desk-scale toolkit for diabetic-retinopathy staging: fundus preprocessing, '
                    'a small CNN trained with Adadelta, full-integer int8 quantization and evaluation.',
        packages=['drnet', 'drnet_visualizer'],
        install_requires=[
            'numpy>=1.20',
            'scipy>=1.6',
            'Pillow>=8.0'
        ],
        extras_require={
            'dev': [
                'pytest'
            ],
            'visualizer': [
                'matplotlib'
            ],
            'docs': [
                'sphinx',
                'sphinx_design',
                'sphinx_book_theme'
            ]
        },
        entry_points={
            'console_scripts': [
                'drnet=drnet.cli:main'
            ]
        },
        license='GPL-2'
    )

if __name__ == '__main__':
    main()
